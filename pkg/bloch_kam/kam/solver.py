"""
Invariant tori of H = <J, M J>/2 + eps V(phi) in standard coordinates

A torus is stored through its embedding phi = theta + u(theta), on which the
flow is theta -> theta + omega t, together with the generating-function data
read off from it: the action label P, the periodic part S_po of the generating
function (J = P - grad S_po on the torus graph), the energy K and the inverse
angle map theta = phi + w(phi).

In one dimension rotational tori are built exactly by quadrature. In any
dimension the embedding solves the configuration-space invariance equation

    (omega . grad)^2 u + eps M grad V(theta + u) = 0,   <u> = 0,

by Newton-Krylov with the constant-coefficient small-divisor preconditioner.
"""

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import structlog
from scipy import optimize
from scipy.sparse.linalg import LinearOperator

from ..errors import EnergyBelowSeparatrix, NoConvergence, SmallDivisorBreakdown, UnsupportedDimension
from ..lattice.core import (
    FourierSeries,
    Lattice,
    box_labels,
    grid_labels,
    grid_to_dense,
    periodic_mean,
    spectral_gradient,
    standard_eval,
    standard_gradient,
    torus_grid,
)
from ..models import DiophantineParams, TargetKind

logger = structlog.get_logger(__name__)

D1_GRID = 1024
D1_SERIES_CUTOFF = 255
SEPARATRIX_MARGIN = 1e-3
RESIDUAL_GRID = 1024
INVERSION_ITERATIONS = 60


def _real_series(lattice: Lattice, dense: np.ndarray) -> FourierSeries:
    """Series of a real function; the dense array is symmetrised first."""
    d = dense.ndim
    mirrored = np.conj(dense[(slice(None, None, -1),) * d])
    return FourierSeries(lattice=lattice, dense=0.5 * (dense + mirrored), hermitian=True)


def diophantine_margin(omega, params: DiophantineParams) -> float:
    """min over 0 < ||k||_inf <= K_max of |<omega, k>| ||k||_2^tau"""
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    if not np.any(omega):
        raise ValueError("Diophantine margin needs omega != 0")
    k = box_labels(len(omega), params.k_max)
    k = k[np.any(k != 0, axis=1)]
    values = np.abs(k @ omega) * np.linalg.norm(k, axis=1) ** params.tau
    return float(np.min(values))


@dataclass
class GeneratingFunction:
    """S(P, phi) = <P, phi> - S_po(phi) with J = P - grad S_po on the torus"""
    P: np.ndarray
    S_po: FourierSeries
    K_value: float
    omega: np.ndarray
    residual: float

    @property
    def K_gradient(self) -> np.ndarray:
        return self.omega

    def momentum(self, phi) -> np.ndarray:
        """Torus graph J(phi) = P - grad S_po(phi), rows."""
        return self.P - np.atleast_2d(np.real(standard_gradient(self.S_po, phi)))


@dataclass
class AngleMap:
    """Forward embedding phi = theta + u(theta) and inverse theta = phi + w(phi)

    Each map is one real FourierSeries per component.
    """
    forward: Tuple[FourierSeries, ...]
    inverse: Tuple[FourierSeries, ...]

    @property
    def dimension(self) -> int:
        return len(self.forward)

    def _apply(self, series: Tuple[FourierSeries, ...], x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        shift = np.column_stack([np.real(standard_eval(s, x)) for s in series])
        return x + shift

    def to_configuration(self, theta) -> np.ndarray:
        return self._apply(self.forward, theta)

    def to_angle(self, phi) -> np.ndarray:
        return self._apply(self.inverse, phi)

    def _jacobian(self, series: Tuple[FourierSeries, ...], x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        rows = [np.real(standard_gradient(s, x)) for s in series]
        return np.eye(self.dimension) + np.stack(rows, axis=1)

    def forward_jacobian(self, theta) -> np.ndarray:
        """I + Du at rows of theta, shape (n, d, d)."""
        return self._jacobian(self.forward, theta)

    def inverse_jacobian(self, phi) -> np.ndarray:
        """I + Dw at rows of phi, shape (n, d, d)."""
        return self._jacobian(self.inverse, phi)


@dataclass
class KamTorus:
    """Invariant torus in standard coordinates with its certificates"""
    generating: GeneratingFunction
    angle_map: AngleMap
    diophantine_margin: float
    epsilon: float = 1.0
    iterations: int = 0
    n_grid: int = 0
    sign: int = 0

    @property
    def lattice(self) -> Lattice:
        return self.generating.S_po.lattice

    @property
    def dimension(self) -> int:
        return self.lattice.dimension

    @property
    def energy(self) -> float:
        return self.generating.K_value

    @property
    def action(self) -> np.ndarray:
        return self.generating.P

    @property
    def frequency(self) -> np.ndarray:
        return self.generating.omega

    @property
    def residual(self) -> float:
        return self.generating.residual

    @property
    def velocity(self) -> np.ndarray:
        """Physical asymptotic velocity L omega (= dK/dp)."""
        return self.lattice.L @ self.frequency

    @property
    def physical_action(self) -> np.ndarray:
        return self.lattice.L_inv.T @ self.action

    def momentum(self, phi) -> np.ndarray:
        return self.generating.momentum(phi)

    def rescaled(self, energy: float) -> "KamTorus":
        """Image under the ballistic map: J / sqrt(E), omega / sqrt(E), K / E, eps / E."""
        root = np.sqrt(energy)
        g = self.generating
        return KamTorus(
            generating=GeneratingFunction(
                P=g.P / root,
                S_po=g.S_po.scaled(1.0 / root),
                K_value=g.K_value / energy,
                omega=g.omega / root,
                residual=g.residual / energy,
            ),
            angle_map=self.angle_map,
            diophantine_margin=self.diophantine_margin / root,
            epsilon=self.epsilon / energy,
            iterations=self.iterations,
            n_grid=self.n_grid,
            sign=self.sign,
        )


def torus_residual(potential: FourierSeries, generating: GeneratingFunction, epsilon: float = 1.0,
                   n: Optional[int] = None) -> float:
    """sup |H_eps(P - grad S_po(phi), phi) - K| over a uniform phi-grid"""
    d = potential.dimension
    n = n or (RESIDUAL_GRID if d == 1 else 48)
    phi = torus_grid(d, n)
    J = generating.momentum(phi)
    kinetic = 0.5 * np.einsum("ni,ij,nj->n", J, potential.lattice.M, J)
    energy = kinetic + epsilon * np.real(standard_eval(potential, phi))
    return float(np.max(np.abs(energy - generating.K_value)))


# One dimension: exact rotational tori


def separatrix_energy(potential: FourierSeries) -> float:
    """Lowest energy with a rotational torus: V_max plus the safety margin."""
    v_min, v_max = potential.extrema
    return v_max + SEPARATRIX_MARGIN * (v_max - v_min + 1.0)


def _require_d1(potential: FourierSeries) -> None:
    if potential.dimension != 1:
        raise UnsupportedDimension("Quadrature tori are available for d = 1 only")


def _action_d1(potential: FourierSeries, energy: float) -> float:
    m = float(potential.lattice.M[0, 0])
    return periodic_mean(
        lambda phi: np.sqrt(2.0 * (energy - np.real(standard_eval(potential, phi[:, None]))) / m)
    )


def action_angle_d1(potential: FourierSeries, energy: float, sign: int = 1) -> KamTorus:
    """Rotational torus at energy E with momentum sign +-1

    Raises:
        EnergyBelowSeparatrix: E at or below V_max + 1e-3 (V_max - V_min + 1)
    """
    _require_d1(potential)
    if energy <= separatrix_energy(potential):
        raise EnergyBelowSeparatrix(
            f"E = {energy:.6g} is below the separatrix margin {separatrix_energy(potential):.6g}"
        )
    sign = 1 if sign >= 0 else -1
    lattice = potential.lattice
    m = float(lattice.M[0, 0])

    def speed(phi: np.ndarray) -> np.ndarray:
        return np.sqrt(2.0 * (energy - np.real(standard_eval(potential, phi[:, None]))) / m)

    P = sign * periodic_mean(speed)
    omega = sign / periodic_mean(lambda phi: 1.0 / (m * speed(phi)))

    phi = torus_grid(1, D1_GRID)
    J = sign * speed(phi[:, 0])
    labels = np.fft.fftfreq(D1_GRID, 1.0 / D1_GRID).round()
    nonzero = labels != 0

    def antiderivative(values: np.ndarray) -> np.ndarray:
        spectrum = np.fft.fft(values)
        out = np.zeros_like(spectrum)
        out[nonzero] = spectrum[nonzero] / (1j * labels[nonzero])
        return out

    def series(spectrum: np.ndarray) -> FourierSeries:
        grid = np.real(np.fft.ifft(spectrum))
        return _real_series(lattice, grid_to_dense(grid, D1_SERIES_CUTOFF))

    S_po = series(antiderivative(P - J))
    w = series(antiderivative(omega / (m * J) - 1.0))

    # forward map phi(theta) by Newton inversion of theta = phi + w(phi)
    theta = phi[:, 0]
    guess = theta.copy()
    for _ in range(INVERSION_ITERATIONS):
        value = np.real(standard_eval(w, guess[:, None]))
        slope = 1.0 + np.real(standard_gradient(w, guess[:, None]))[:, 0]
        step = (guess + value - theta) / slope
        guess -= step
        if np.max(np.abs(step)) < 1e-15:
            break
    u = _real_series(lattice, grid_to_dense(guess - theta, D1_SERIES_CUTOFF))

    generating = GeneratingFunction(P=np.array([P]), S_po=S_po, K_value=float(energy),
                                    omega=np.array([omega]), residual=0.0)
    generating.residual = torus_residual(potential, generating)
    logger.debug("Rotational torus", energy=energy, sign=sign, action=P, omega=omega,
                 residual=generating.residual)
    return KamTorus(
        generating=generating,
        angle_map=AngleMap(forward=(u,), inverse=(w,)),
        diophantine_margin=abs(omega),
        epsilon=1.0,
        n_grid=D1_GRID,
        sign=sign,
    )


def torus_at_action_d1(potential: FourierSeries, action: float) -> KamTorus:
    """Rotational torus with action label P, K(P) inverted by Brent's method

    Raises:
        EnergyBelowSeparatrix: |P| does not exceed the separatrix action
    """
    _require_d1(potential)
    target = abs(float(np.atleast_1d(action)[0]))
    sign = 1 if np.atleast_1d(action)[0] >= 0 else -1
    low = separatrix_energy(potential)
    if target <= _action_d1(potential, low):
        raise EnergyBelowSeparatrix(f"Action {target:.6g} lies inside the separatrix")
    v_min, v_max = potential.extrema
    m = float(potential.lattice.M[0, 0])
    high = max(2.0 * low, v_max + 0.5 * m * target**2 + 1.0)
    while _action_d1(potential, high) < target:
        high *= 2.0
    energy = optimize.brentq(lambda e: _action_d1(potential, e) - target, low, high,
                             xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)
    return action_angle_d1(potential, energy, sign)


# Fourier-Newton construction


class _InvarianceProblem:
    """Residual and preconditioner of the embedding equation on an n^d grid"""

    def __init__(self, potential: FourierSeries, omega: np.ndarray, epsilon: float, n: int):
        self.potential = potential
        self.M = potential.lattice.M
        self.omega = omega
        self.epsilon = epsilon
        self.n = n
        self.d = potential.dimension
        self.shape = (n,) * self.d
        self.theta = torus_grid(self.d, n)
        labels = grid_labels(self.d, n)
        self.labels = labels
        self.divisor = labels @ omega
        mean = np.all(labels == 0, axis=-1)
        nyquist = np.any(np.abs(labels) == n // 2, axis=-1) if n % 2 == 0 else np.zeros(self.shape, bool)
        self.active = ~(mean | nyquist)
        self.symbol = np.where(self.active, -(self.divisor**2), 1.0)
        self.axes = tuple(range(1, self.d + 1))

    def unpack(self, x: np.ndarray) -> np.ndarray:
        return x.reshape((self.d,) + self.shape)

    def force(self, u: np.ndarray) -> np.ndarray:
        """eps M grad V(theta + u) on the grid, shape (d,) + grid."""
        phi = self.theta + u.reshape(self.d, -1).T
        grad = np.real(standard_gradient(self.potential, phi))
        return (self.epsilon * grad @ self.M.T).T.reshape((self.d,) + self.shape)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        u = self.unpack(x)
        u_hat = np.fft.fftn(u, axes=self.axes)
        f_hat = np.fft.fftn(self.force(u), axes=self.axes)
        out = np.where(self.active, self.symbol * u_hat + f_hat, u_hat)
        return np.real(np.fft.ifftn(out, axes=self.axes)).reshape(-1)

    def preconditioner(self) -> LinearOperator:
        size = self.d * self.n**self.d

        def solve(y: np.ndarray) -> np.ndarray:
            y_hat = np.fft.fftn(self.unpack(np.real(y)), axes=self.axes)
            return np.real(np.fft.ifftn(y_hat / self.symbol, axes=self.axes)).reshape(-1)

        return LinearOperator((size, size), matvec=solve, dtype=float)

    def first_order(self) -> np.ndarray:
        """u_hat = eps M (i m) V_m / (omega . m)^2 on the active modes."""
        if self.epsilon == 0:
            return np.zeros(self.d * self.n**self.d)
        u = self.force(np.zeros((self.d,) + self.shape))
        u_hat = np.fft.fftn(u, axes=self.axes)
        u_hat = np.where(self.active, u_hat / np.where(self.active, self.divisor**2, 1.0), 0.0)
        return np.real(np.fft.ifftn(u_hat, axes=self.axes)).reshape(-1)

    def check_divisors(self, params: Optional[DiophantineParams]) -> None:
        if params is None:
            return
        norms = np.linalg.norm(self.labels, axis=-1)
        bound = 0.5 * params.gamma * np.where(self.active, norms, 1.0) ** (-params.tau)
        small = self.active & (np.abs(self.divisor) < bound)
        if np.any(small):
            index = np.unravel_index(np.argmax(small), self.shape)
            mode = tuple(int(v) for v in self.labels[index])
            divisor = float(abs(self.divisor[index]))
            raise SmallDivisorBreakdown(
                f"Mode {mode} has divisor {divisor:.3e} below half the Diophantine bound",
                mode=mode,
                divisor=divisor,
            )


def _read_off_torus(
    problem: _InvarianceProblem,
    u: np.ndarray,
    residual_grid: Optional[int],
) -> Tuple[GeneratingFunction, AngleMap]:
    """P, K, S_po and both angle maps from a converged embedding."""
    d, n, axes = problem.d, problem.n, problem.axes
    lattice = problem.potential.lattice
    omega = problem.omega
    M_inv = lattice.M_inv

    Du = np.stack([spectral_gradient(u[a]) for a in range(d)], axis=1)  # (d_component, d_axis) + grid
    transport = np.einsum("b,ab...->a...", omega, Du)
    J = np.einsum("ab,b...->a...", M_inv, omega[(slice(None),) + (None,) * d] + transport)
    jac = np.moveaxis(Du, (0, 1), (-2, -1)) + np.eye(d)
    det = np.linalg.det(jac)

    rows_J = J.reshape(d, -1).T
    rows_det = det.reshape(-1)
    P = np.mean(rows_J * rows_det[:, None], axis=0)

    phi = problem.theta + u.reshape(d, -1).T
    energy = 0.5 * np.einsum("ni,ij,nj->n", rows_J, lattice.M, rows_J)
    energy += problem.epsilon * np.real(standard_eval(problem.potential, phi))
    K = float(np.mean(energy))

    # coefficients in phi by the change of variables phi = theta + u(theta)
    cutoff = max(1, n // 2 - 1)
    modes = box_labels(d, cutoff)
    basis = np.exp(-1j * (phi @ modes.T)) * rows_det[:, None] / len(phi)
    c = basis.T @ (P - rows_J)  # (modes, d)
    w_coeffs = basis.T @ (-u.reshape(d, -1).T)
    norms = np.sum(modes * modes, axis=1)
    s_hat = np.where(norms > 0, -1j * np.sum(modes * c, axis=1) / np.where(norms > 0, norms, 1), 0.0)
    w_coeffs[norms == 0] = 0.0

    shape = (2 * cutoff + 1,) * d
    S_po = _real_series(lattice, s_hat.reshape(shape))
    inverse = tuple(_real_series(lattice, w_coeffs[:, a].reshape(shape)) for a in range(d))
    forward = tuple(_real_series(lattice, grid_to_dense(u[a], cutoff)) for a in range(d))

    generating = GeneratingFunction(P=P, S_po=S_po, K_value=K, omega=omega.copy(), residual=0.0)
    generating.residual = torus_residual(problem.potential, generating, problem.epsilon, residual_grid)
    return generating, AngleMap(forward=forward, inverse=inverse)


def _solve_embedding(
    problem: _InvarianceProblem,
    u0: np.ndarray,
    tol: float,
    max_iterations: int,
) -> Tuple[np.ndarray, int]:
    if np.max(np.abs(problem(u0)), initial=0.0) <= tol:
        return u0, 1
    iterations = [0]

    def count(x, f):
        iterations[0] += 1

    try:
        x = optimize.newton_krylov(
            problem,
            u0,
            f_tol=tol,
            maxiter=max_iterations,
            inner_M=problem.preconditioner(),
            method="lgmres",
            callback=count,
        )
    except optimize.NoConvergence as e:
        last = e.args[0] if e.args else u0
        residual = float(np.max(np.abs(problem(np.asarray(last)))))
        raise NoConvergence(
            f"Newton iteration stopped after {max_iterations} steps with residual {residual:.3e}",
            last_residual=residual,
        ) from e
    except (ValueError, FloatingPointError, np.linalg.LinAlgError) as e:
        raise NoConvergence(f"Newton iteration failed: {e}") from e
    if not np.all(np.isfinite(x)):
        raise NoConvergence("Newton iteration diverged")
    return x, iterations[0]


def newton_torus(
    potential: FourierSeries,
    target: Sequence[float],
    epsilon: float = 1.0,
    n_grid: int = 32,
    tol: float = 1e-8,
    params: Optional[DiophantineParams] = None,
    target_kind: TargetKind = TargetKind.FREQUENCY,
    max_iterations: int = 50,
    residual_tol: Optional[float] = None,
    residual_grid: Optional[int] = None,
) -> KamTorus:
    """Invariant torus at a fixed frequency (or action) by Fourier-Newton

    Args:
        potential: Potential series; eps scales it
        target: Frequency omega (standard frame) or action P
        epsilon: Effective perturbation strength (1/E after ballistic rescaling)
        n_grid: Angle grid points per dimension
        tol: Sup-norm tolerance on the invariance equation
        params: Diophantine parameters; enables the margin and divisor checks
        target_kind: FREQUENCY, or ACTION via an outer iteration on omega
        residual_tol: Acceptance bound on the energy residual (default 100 tol)

    Raises:
        SmallDivisorBreakdown: a grid mode's divisor is below half the Diophantine bound
        NoConvergence: Newton stagnated or the torus residual exceeds residual_tol
    """
    d = potential.dimension
    target = np.atleast_1d(np.asarray(target, dtype=float))
    if target.shape != (d,):
        raise ValueError(f"Target must have {d} components, got {target.shape}")
    M = potential.lattice.M
    residual_tol = 100.0 * tol if residual_tol is None else residual_tol

    omega = target.copy() if target_kind is TargetKind.FREQUENCY else M @ target
    u = None
    total_iterations = 0
    for outer in range(max_iterations):
        margin = float("inf")
        if params is not None:
            margin = diophantine_margin(omega, params)
            if margin < params.gamma:
                raise SmallDivisorBreakdown(
                    f"Frequency {omega.tolist()} fails the Diophantine condition (margin {margin:.3e} < {params.gamma:.3e})",
                    divisor=margin,
                )
        problem = _InvarianceProblem(potential, omega, epsilon, n_grid)
        problem.check_divisors(params)
        u0 = problem.first_order() if u is None else u
        u, iterations = _solve_embedding(problem, u0, tol, max_iterations)
        total_iterations += iterations
        generating, angle_map = _read_off_torus(problem, problem.unpack(u), residual_grid)
        if target_kind is TargetKind.FREQUENCY:
            break
        miss = target - generating.P
        if np.max(np.abs(miss)) <= tol * max(1.0, float(np.max(np.abs(target)))):
            break
        omega = omega + M @ miss
    else:
        raise NoConvergence(f"Action target not met after {max_iterations} frequency updates")

    if not generating.residual <= residual_tol * max(1.0, abs(generating.K_value)):
        raise NoConvergence(
            f"Torus residual {generating.residual:.3e} exceeds {residual_tol:.3e}",
            last_residual=generating.residual,
        )
    logger.debug("Torus converged", omega=omega.tolist(), epsilon=epsilon, iterations=total_iterations,
                 residual=generating.residual, action=generating.P.tolist())
    return KamTorus(
        generating=generating,
        angle_map=angle_map,
        diophantine_margin=margin,
        epsilon=epsilon,
        iterations=total_iterations,
        n_grid=n_grid,
    )


def unperturbed_frequency(lattice: Lattice, action) -> np.ndarray:
    """omega_0 = M P, the frequency of the free torus with action P."""
    return lattice.M @ np.atleast_1d(np.asarray(action, dtype=float))

