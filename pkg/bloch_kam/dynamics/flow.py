"""
Classical flow on T*T, asymptotic velocities and the energy-velocity measure

Trajectories are integrated by the symmetric kick-drift-kick splitting with
positions kept unwrapped in R^d, so the Birkhoff average of p over [0, T] is
exactly the position increment divided by T.
"""

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import structlog

from ..batch import parallel_map
from ..errors import EmptyShell, StepTooLarge, UnsupportedDimension
from ..lattice.core import (
    FourierSeries,
    Lattice,
    PhasePoint,
    hamiltonian,
    periodic_mean,
    standard_eval,
)
from ..models import MeasureKind
from ..spectra.bloch import phase_space_volume

logger = structlog.get_logger(__name__)

DRIFT_BOUND = 1e-4
MAX_REFINEMENTS = 6
RECORDS_PER_RUN = 64
SAMPLE_CHUNK = 4096
MAX_EMPTY_PROPOSALS = 1_000_000
VELOCITY_CHUNK = 256
TAIL_SPACINGS = 2
TAIL_RECORDS = 2048

ForceField = Callable[[np.ndarray], np.ndarray]
# q -> (force, potential value); both come from one set of plane waves
PotentialField = Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]]


@dataclass
class Trajectory:
    """Recorded samples of one orbit, positions unwrapped"""
    times: np.ndarray
    p: np.ndarray
    q: np.ndarray
    energy_drift: float
    dt: float

    @property
    def samples(self) -> List[Tuple[float, PhasePoint]]:
        return [(float(t), PhasePoint(p=p, q=q)) for t, p, q in zip(self.times, self.p, self.q)]

    @property
    def final(self) -> PhasePoint:
        return PhasePoint(p=self.p[-1], q=self.q[-1])

    def __len__(self) -> int:
        return len(self.times)


@dataclass
class AsymptoticVelocityEstimate:
    value: np.ndarray
    window_T: float
    uncertainty: float
    converged: bool
    dt: float


@dataclass
class EmpiricalMeasure:
    """Weighted atoms in (energy, velocity) space

    ``points`` has rows (E, v_1, .., v_d); weights are non-negative and sum to
    total_mass.
    """
    weights: np.ndarray
    points: np.ndarray
    kind: MeasureKind
    volume_stderr: float = 0.0
    unconverged_fraction: float = 0.0
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=float)
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if len(self.weights) == 0:
            self.points = self.points.reshape(0, self.points.shape[-1])
        if np.any(self.weights < 0) or not np.all(np.isfinite(self.points)):
            raise ValueError("Measure atoms must have non-negative weights and finite points")

    @property
    def total_mass(self) -> float:
        return float(np.sum(self.weights))

    @property
    def dimension(self) -> int:
        return self.points.shape[1] - 1

    @property
    def energies(self) -> np.ndarray:
        return self.points[:, 0]

    @property
    def velocities(self) -> np.ndarray:
        return self.points[:, 1:]

    @property
    def atoms(self) -> List[Tuple[float, np.ndarray]]:
        return list(zip(self.weights.tolist(), self.points))

    def __len__(self) -> int:
        return len(self.weights)

    def integrate(self, func: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> float:
        """sum_i w_i f(E_i, v_i) for a vectorised test function f(E, v)."""
        if len(self) == 0:
            return 0.0
        return float(np.dot(self.weights, func(self.energies, self.velocities)))


@dataclass
class LiouvilleSample:
    """Uniform Liouville samples of the shell and the shell-volume estimate"""
    p: np.ndarray
    q: np.ndarray
    volume: float
    volume_stderr: float
    proposals: int

    @property
    def points(self) -> List[PhasePoint]:
        return [PhasePoint(p=p, q=q) for p, q in zip(self.p, self.q)]

    def __len__(self) -> int:
        return len(self.p)


# Integrator


def potential_field(potential: FourierSeries) -> PotentialField:
    """(-grad V, V) in cartesian components, vectorised over rows of q"""
    labels, coeffs = potential.support
    if len(coeffs) == 0:
        return lambda q: (np.zeros_like(q), np.zeros(q.shape[:-1]))
    duals = potential.lattice.dual_vectors(labels)
    weights = 1j * coeffs[:, None] * duals

    def field_at(q: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        waves = np.exp(1j * (q @ duals.T))
        return -np.real(waves @ weights), np.real(waves @ coeffs)

    return field_at


def force_field(potential: FourierSeries) -> ForceField:
    """-grad V in cartesian components, vectorised over rows of q"""
    field_at = potential_field(potential)
    return lambda q: field_at(q)[0]


def scaled_potential_field(potential: FourierSeries, epsilon: float) -> PotentialField:
    """(-eps grad_phi V(L phi), eps V(L phi)) for the rescaled Hamiltonian"""
    labels, coeffs = potential.support
    if len(coeffs) == 0 or epsilon == 0:
        return lambda phi: (np.zeros_like(phi), np.zeros(phi.shape[:-1]))
    weights = 1j * coeffs[:, None] * labels

    def field_at(phi: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        waves = np.exp(1j * (phi @ labels.T))
        return -epsilon * np.real(waves @ weights), epsilon * np.real(waves @ coeffs)

    return field_at


def _kick_drift_kick(
    p: np.ndarray,
    q: np.ndarray,
    field_at: PotentialField,
    dt: float,
    n_steps: int,
    record_steps: np.ndarray,
    drift_matrix: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Order-2 symmetric splitting

    Records the initial state and the state after each of the increasing
    ``record_steps``, and returns per orbit the largest energy deviation from
    the start seen at any step.
    """
    p = np.array(p, dtype=float)
    q = np.array(q, dtype=float)
    record_steps = np.asarray(record_steps, dtype=int)
    slot = np.zeros(n_steps + 1, dtype=int)
    slot[record_steps] = np.arange(1, len(record_steps) + 1)
    p_out = np.empty((len(record_steps) + 1,) + p.shape)
    q_out = np.empty((len(record_steps) + 1,) + q.shape)
    p_out[0], q_out[0] = p, q
    half = 0.5 * dt

    def kinetic(p: np.ndarray) -> np.ndarray:
        if drift_matrix is None:
            return 0.5 * np.sum(p * p, axis=-1)
        return 0.5 * np.sum(p * (p @ drift_matrix.T), axis=-1)

    f, v = field_at(q)
    start = kinetic(p) + v
    drift = np.zeros_like(start)
    for step in range(1, n_steps + 1):
        p += half * f
        q += dt * (p if drift_matrix is None else p @ drift_matrix.T)
        f, v = field_at(q)
        p += half * f
        np.maximum(drift, np.abs(kinetic(p) + v - start), out=drift)
        if slot[step]:
            p_out[slot[step]] = p
            q_out[slot[step]] = q
    return p_out, q_out, drift


def _steps(T: float, dt: float, records: int) -> Tuple[int, int, float]:
    """(n_steps, stride, dt_eff) with n_steps a multiple of stride and dt_eff <= dt"""
    wanted = max(1, int(np.ceil(T / dt - 1e-9)))
    records = max(1, min(records, wanted))
    stride = int(np.ceil(wanted / records))
    n_steps = stride * records
    return n_steps, stride, T / n_steps


def _uniform_records(n_steps: int, stride: int) -> np.ndarray:
    return np.arange(stride, n_steps + 1, stride)


def _velocity_records(n_steps: int, stride: int) -> np.ndarray:
    """Uniform records plus a dense tail over the last TAIL_SPACINGS record spacings

    The tail resolves any oscillation shorter than the tail window, which the
    uniform records can alias.
    """
    span = min(n_steps, TAIL_SPACINGS * stride)
    tail_stride = max(1, -(-span // TAIL_RECORDS))
    tail = np.arange(n_steps, n_steps - span, -tail_stride)[::-1]
    return np.union1d(_uniform_records(n_steps, stride), tail)


def _drift_bound(energy: np.ndarray, v_min: float) -> np.ndarray:
    return DRIFT_BOUND * np.maximum(energy - v_min, 0.0)


def _validate_times(T: float, dt: float) -> None:
    if not (T > 0 and dt > 0 and dt <= T):
        raise ValueError(f"Need T > 0, dt > 0 and dt <= T (T={T}, dt={dt})")


def integrate_flow(
    potential: FourierSeries,
    x0: PhasePoint,
    T: float,
    dt: float,
    records: int = 1000,
) -> Trajectory:
    """Integrate p' = -grad V, q' = p from x0 over [0, T]

    Raises:
        StepTooLarge: energy drift exceeded 1e-4 (E - V_min)
    """
    _validate_times(T, dt)
    d = potential.dimension
    p0 = np.atleast_1d(np.asarray(x0.p, dtype=float)).reshape(1, d)
    q0 = np.atleast_1d(np.asarray(x0.q, dtype=float)).reshape(1, d)
    n_steps, stride, dt_eff = _steps(T, dt, records)
    p, q, step_drift = _kick_drift_kick(
        p0, q0, potential_field(potential), dt_eff, n_steps, _uniform_records(n_steps, stride)
    )
    p, q = p[:, 0, :], q[:, 0, :]

    drift = float(step_drift[0])
    bound = float(_drift_bound(hamiltonian(potential, p0, q0), potential.extrema[0])[0])
    if drift > bound:
        raise StepTooLarge(
            f"Energy drift {drift:.3e} exceeds {bound:.3e} at dt={dt_eff:g}; refine dt",
            drift=drift,
            dt=dt_eff,
        )
    times = np.arange(len(p)) * stride * dt_eff
    return Trajectory(times=times, p=p, q=q, energy_drift=drift, dt=dt_eff)


def _velocity_batch(
    potential: FourierSeries,
    p: np.ndarray,
    q: np.ndarray,
    T: float,
    dt: float,
    refine: bool,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(v_bar, uncertainty, dt used) per row, halving dt for rows that drift.

    The uncertainty is the larger of the half-window disagreement and the
    peak-to-peak spread of q(t) - q(0) - v_bar t over the records, divided by
    T. The second term bounds the boundary error of a bounded oscillation once
    the dense tail spans one of its periods.
    """
    n, d = p.shape
    velocity = np.zeros((n, d))
    uncertainty = np.zeros(n)
    dt_used = np.zeros(n)
    field_at = potential_field(potential)
    v_min = potential.extrema[0]
    pending = np.arange(n)
    step = dt
    for attempt in range(MAX_REFINEMENTS + 1):
        n_steps, stride, dt_eff = _steps(T, step, RECORDS_PER_RUN)
        record_steps = _velocity_records(n_steps, stride)
        p_rec, q_rec, drift = _kick_drift_kick(p[pending], q[pending], field_at, dt_eff, n_steps, record_steps)
        start = hamiltonian(potential, p[pending], q[pending])
        ok = drift <= _drift_bound(start, v_min)

        done = pending[ok]
        full = (q_rec[-1] - q_rec[0]) / T
        mid_step = (n_steps // stride // 2) * stride
        mid = 0 if mid_step == 0 else 1 + int(np.searchsorted(record_steps, mid_step))
        half = (q_rec[-1] - q_rec[mid]) / (T - mid_step * dt_eff)
        times = np.concatenate([[0], record_steps]) * dt_eff
        excursion = q_rec - q_rec[0] - times[:, None, None] * full[None, :, :]
        oscillation = np.linalg.norm(np.ptp(excursion, axis=0), axis=1) / T
        velocity[done] = full[ok]
        uncertainty[done] = np.maximum(np.linalg.norm(full[ok] - half[ok], axis=1), oscillation[ok])
        dt_used[done] = dt_eff
        pending = pending[~ok]
        if len(pending) == 0:
            break
        worst = float(np.max(drift[~ok]))
        if not refine or attempt == MAX_REFINEMENTS:
            raise StepTooLarge(
                f"Energy drift {worst:.3e} exceeds the bound at dt={dt_eff:g} for {len(pending)} orbits",
                drift=worst,
                dt=dt_eff,
            )
        logger.debug("Halving time step", dt=dt_eff, orbits=len(pending), drift=worst)
        step = 0.5 * dt_eff
    return velocity, uncertainty, dt_used


def asymptotic_velocity(
    potential: FourierSeries,
    x0: PhasePoint,
    T: float,
    dt: float,
    tol: float = 1e-3,
    refine: bool = True,
) -> AsymptoticVelocityEstimate:
    """Birkhoff average of p over [0, T] with its uncertainty

    The estimate is flagged unconverged when the uncertainty reaches tol:
    either the averages over [0, T] and [T/2, T] differ by that much, or the
    bounded part of q(t) - v_bar t moves the average by that much at T.
    """
    _validate_times(T, dt)
    d = potential.dimension
    p = np.atleast_1d(np.asarray(x0.p, dtype=float)).reshape(1, d)
    q = np.atleast_1d(np.asarray(x0.q, dtype=float)).reshape(1, d)
    velocity, uncertainty, dt_used = _velocity_batch(potential, p, q, T, dt, refine)
    return AsymptoticVelocityEstimate(
        value=velocity[0],
        window_T=T,
        uncertainty=float(uncertainty[0]),
        converged=bool(uncertainty[0] < tol),
        dt=float(dt_used[0]),
    )


def asymptotic_velocities(
    potential: FourierSeries,
    p: np.ndarray,
    q: np.ndarray,
    T: float,
    dt: float,
    tol: float = 1e-3,
    workers: int = 1,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised asymptotic_velocity over rows; returns (v_bar, uncertainty, converged)"""
    _validate_times(T, dt)
    d = potential.dimension
    p = np.asarray(p, dtype=float).reshape(-1, d)
    q = np.asarray(q, dtype=float).reshape(-1, d)
    chunks = [slice(i, i + VELOCITY_CHUNK) for i in range(0, len(p), VELOCITY_CHUNK)]
    parts = parallel_map(lambda s: _velocity_batch(potential, p[s], q[s], T, dt, True), chunks, workers=workers)
    if not parts:
        return np.zeros((0, d)), np.zeros(0), np.zeros(0, dtype=bool)
    velocity = np.concatenate([part[0] for part in parts])
    uncertainty = np.concatenate([part[1] for part in parts])
    return velocity, uncertainty, uncertainty < tol


# Liouville sampling and measures


def sample_liouville(
    potential: FourierSeries,
    interval: Tuple[float, float],
    n_samples: int,
    seed: int,
) -> LiouvilleSample:
    """Uniform samples of P_I = H^{-1}(I) by rejection from T x {|p|^2 <= 2(b - V_min)}

    Proposals are drawn in chunks of 4096 from ``default_rng([seed, chunk])``
    so the sample is fixed by the seed alone.

    Raises:
        EmptyShell: no proposal landed in the shell after 10^6 tries
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    a, b = interval
    lattice = potential.lattice
    d = lattice.dimension
    v_min, _ = potential.extrema
    if b <= v_min:
        raise EmptyShell(f"Interval [{a}, {b}] lies below V_min = {v_min:.6g}")
    radius = np.sqrt(2.0 * (b - v_min))
    box_volume = lattice.cell_volume * (2.0 * radius) ** d

    accepted_p: List[np.ndarray] = []
    accepted_q: List[np.ndarray] = []
    n_accepted = 0
    proposals = 0
    chunk = 0
    while n_accepted < n_samples:
        rng = np.random.default_rng([seed, chunk])
        p = rng.uniform(-radius, radius, size=(SAMPLE_CHUNK, d))
        q = rng.uniform(0.0, 1.0, size=(SAMPLE_CHUNK, d)) @ lattice.basis.T
        energy = hamiltonian(potential, p, q)
        keep = (energy >= a) & (energy <= b)
        accepted_p.append(p[keep])
        accepted_q.append(q[keep])
        n_accepted += int(keep.sum())
        proposals += SAMPLE_CHUNK
        chunk += 1
        if n_accepted == 0 and proposals >= MAX_EMPTY_PROPOSALS:
            raise EmptyShell(f"No proposal out of {proposals} hit the shell [{a}, {b}]")

    acceptance = n_accepted / proposals
    volume = box_volume * acceptance
    stderr = box_volume * np.sqrt(acceptance * (1.0 - acceptance) / proposals)
    logger.debug("Liouville sample drawn", accepted=n_accepted, proposals=proposals, volume=volume)
    return LiouvilleSample(
        p=np.concatenate(accepted_p)[:n_samples],
        q=np.concatenate(accepted_q)[:n_samples],
        volume=float(volume),
        volume_stderr=float(stderr),
        proposals=proposals,
    )


def classical_measure(
    potential: FourierSeries,
    interval: Tuple[float, float],
    n_samples: int,
    T: float,
    dt: float,
    seed: int,
    tol: float = 1e-3,
    workers: int = 1,
) -> EmpiricalMeasure:
    """Monte-Carlo image of Liouville measure under x -> (H(x), v_bar(x))

    Unconverged averages are placed at velocity 0 and counted in
    ``unconverged_fraction``.
    """
    sample = sample_liouville(potential, interval, n_samples, seed)
    velocity, uncertainty, converged = asymptotic_velocities(
        potential, sample.p, sample.q, T, dt, tol=tol, workers=workers
    )
    velocity[~converged] = 0.0
    energy = hamiltonian(potential, sample.p, sample.q)
    unconverged = float(np.mean(~converged)) if len(converged) else 0.0
    if unconverged:
        logger.info("Unconverged asymptotic velocities", fraction=unconverged, tol=tol, T=T)
    weights = np.full(len(sample), sample.volume / len(sample))
    return EmpiricalMeasure(
        weights=weights,
        points=np.column_stack([energy, velocity]),
        kind=MeasureKind.MONTE_CARLO,
        volume_stderr=sample.volume_stderr,
        unconverged_fraction=unconverged,
        metadata={"n_samples": len(sample), "T": T, "dt": dt, "seed": seed,
                  "max_uncertainty": float(np.max(uncertainty)) if len(uncertainty) else 0.0},
    )


def rotational_period(potential: FourierSeries, energy: float) -> float:
    """Time to cross one cell on the rotational orbit at energy E > V_max (d = 1)"""
    lattice = potential.lattice
    if lattice.dimension != 1:
        raise UnsupportedDimension("Rotational periods are defined for d = 1 only")
    _, v_max = potential.extrema
    if energy <= v_max:
        raise ValueError(f"Energy {energy} does not exceed V_max = {v_max}")
    length = lattice.cell_volume

    def inverse_momentum(phi: np.ndarray) -> np.ndarray:
        V = np.real(standard_eval(potential, phi[:, None]))
        return 1.0 / np.sqrt(2.0 * (energy - V))

    return length * periodic_mean(inverse_momentum)


def classical_measure_quadrature(
    potential: FourierSeries,
    interval: Tuple[float, float],
    n_energy_cells: int = 64,
    order: int = 8,
) -> EmpiricalMeasure:
    """Energy-velocity measure of a one-dimensional system by quadrature

    Above V_max the shell splits into two rotational components with velocities
    +-a/T(E) and Liouville density T(E) per unit energy; librating energies
    below V_max carry velocity 0 with mass from volume differences.
    """
    if potential.dimension != 1:
        raise UnsupportedDimension("Quadrature measures are available for d = 1 only")
    a, b = interval
    v_min, v_max = potential.extrema
    a = max(a, v_min)
    if b <= a:
        raise EmptyShell(f"Interval [{interval[0]}, {interval[1]}] lies below V_min = {v_min:.6g}")
    length = potential.lattice.cell_volume
    nodes, gauss_weights = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(a, b, n_energy_cells + 1)

    weights: List[float] = []
    points: List[Tuple[float, float]] = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        if lo < v_max:
            top = min(hi, v_max)
            pieces = np.linspace(lo, top, order + 1)
            for e0, e1 in zip(pieces[:-1], pieces[1:]):
                weights.append(phase_space_volume(potential, (e0, e1)))
                points.append((0.5 * (e0 + e1), 0.0))
            lo = top
        if hi > lo:
            energies = 0.5 * (hi - lo) * nodes + 0.5 * (hi + lo)
            for energy, w in zip(energies, 0.5 * (hi - lo) * gauss_weights):
                period = rotational_period(potential, energy)
                for sign in (1.0, -1.0):
                    weights.append(period * w)
                    points.append((energy, sign * length / period))

    return EmpiricalMeasure(
        weights=np.asarray(weights),
        points=np.asarray(points),
        kind=MeasureKind.QUADRATURE,
        metadata={"n_energy_cells": n_energy_cells, "order": order},
    )


@dataclass
class ConjugacyReport:
    """Deviation between M_E o Phi^t and Phi_hat^{sqrt(E) t} o M_E"""
    energy: float
    t: float
    max_momentum_error: float
    max_angle_error: float

    @property
    def max_error(self) -> float:
        return max(self.max_momentum_error, self.max_angle_error)


def flow_conjugacy_check(
    potential: FourierSeries,
    p: np.ndarray,
    q: np.ndarray,
    energy: float,
    t: float,
    dt: float,
) -> ConjugacyReport:
    """Compare the physical flow with the rescaled flow at eps = 1/E

    Both sides use the same splitting with dt_hat = sqrt(E) dt, under which the
    discrete maps are conjugate as well, so the deviation is round-off.
    """
    lattice: Lattice = potential.lattice
    d = lattice.dimension
    p = np.asarray(p, dtype=float).reshape(-1, d)
    q = np.asarray(q, dtype=float).reshape(-1, d)
    n_steps, _, dt_eff = _steps(t, dt, 1)

    p_t, q_t, _ = _kick_drift_kick(p, q, potential_field(potential), dt_eff, n_steps, [n_steps])
    J_t = p_t[-1] @ lattice.L / np.sqrt(energy)
    phi_t = q_t[-1] @ lattice.L_inv.T

    J0 = p @ lattice.L / np.sqrt(energy)
    phi0 = q @ lattice.L_inv.T
    J_hat, phi_hat, _ = _kick_drift_kick(
        J0, phi0, scaled_potential_field(potential, 1.0 / energy), np.sqrt(energy) * dt_eff,
        n_steps, [n_steps], drift_matrix=lattice.M,
    )
    return ConjugacyReport(
        energy=energy,
        t=t,
        max_momentum_error=float(np.max(np.abs(J_hat[-1] - J_t))),
        max_angle_error=float(np.max(np.abs(phi_hat[-1] - phi_t))),
    )
