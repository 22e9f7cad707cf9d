"""
Quantum and classical energy-velocity measures under ballistic scaling

The quantum measure places one atom of mass (2 pi hbar)^d / N_k at
(E_n(k), v_n(k)) for every grid point k and band with E_n(k) in I. Both
measures are tested against a panel of compactly supported bump products
rescaled as f_E(e, v) = E^(-d/2) f(e / E, v / sqrt(E)), and compared in
Wasserstein-1 on their normalised restrictions to the panel support.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import ot
import structlog

from ..batch import BatchRunner
from ..cache import BandCache
from ..dynamics.flow import EmpiricalMeasure, classical_measure, classical_measure_quadrature
from ..errors import BlochKamError, ConfigError, EmptyOverlap, UnsupportedDimension
from ..fits.regression import PowerLawFit, fit_power_law, skipped_fit
from ..lattice.core import TWO_PI, FourierSeries
from ..models import ClassicalMethod, MeasureKind
from ..spectra.bloch import band_sweep, brillouin_grid, resolving_cutoff

logger = structlog.get_logger(__name__)


@dataclass(frozen=True)
class BumpFunction:
    """Product of (1 - t^2)^(s+1) bumps, t = (x - center) / width, on (e, v_1, .., v_d)"""
    center: Tuple[float, ...]
    width: Tuple[float, ...]
    smoothness: int = 2

    @property
    def dimension(self) -> int:
        return len(self.center) - 1

    def __call__(self, energy: np.ndarray, velocity: np.ndarray) -> np.ndarray:
        energy = np.atleast_1d(np.asarray(energy, dtype=float))
        velocity = np.asarray(velocity, dtype=float).reshape(len(energy), self.dimension)
        x = np.column_stack([energy, velocity])
        t = (x - np.asarray(self.center)) / np.asarray(self.width)
        factors = np.where(np.abs(t) < 1.0, np.clip(1.0 - t * t, 0.0, None) ** (self.smoothness + 1), 0.0)
        return np.prod(factors, axis=1)

    def scaled(self, energy_scale: float):
        """f_E as a function of unscaled (e, v)."""
        d = self.dimension
        root = np.sqrt(energy_scale)

        def f_E(energy: np.ndarray, velocity: np.ndarray) -> np.ndarray:
            return energy_scale ** (-d / 2) * self(np.asarray(energy) / energy_scale, np.asarray(velocity) / root)

        return f_E

    def support(self, energy_scale: float = 1.0) -> np.ndarray:
        """Rows (low, high) per axis of the support of f_E."""
        c = np.asarray(self.center)
        w = np.asarray(self.width)
        scale = np.array([energy_scale] + [np.sqrt(energy_scale)] * self.dimension)
        return np.column_stack([(c - w) * scale, (c + w) * scale])

    @property
    def slope_bound(self) -> float:
        """max |d/dt (1 - t^2)^(s+1)| = 2(s+1) t (1 - t^2)^s at t^2 = 1/(2s+1)"""
        s = self.smoothness
        t = np.sqrt(1.0 / (2 * s + 1))
        return float(2 * (s + 1) * t * (1 - t * t) ** s)

    def velocity_lipschitz(self, energy_scale: float = 1.0) -> float:
        """Lipschitz constant of f_E in v (Euclidean)."""
        d = self.dimension
        widths = np.asarray(self.width[1:])
        base = self.slope_bound * float(np.sqrt(np.sum(widths**-2.0)))
        return energy_scale ** (-d / 2) * base / np.sqrt(energy_scale)


@dataclass
class TestFunctionPanel:
    """Bump functions in scaled variables, evaluated at a common energy scale"""
    __test__ = False

    functions: List[BumpFunction]
    energy_scale: float = 1.0

    @classmethod
    def default(cls, dimension: int, smoothness: int = 2, energy_scale: float = 1.0) -> "TestFunctionPanel":
        """Bumps over scaled energies [0.6, 1.4] crossing both ballistic branches"""
        if dimension == 1:
            energies = [0.8, 1.0, 1.2]
            velocities = [(-1.2,), (0.0,), (1.2,)]
            widths = (0.2, 0.6)
        elif dimension == 2:
            energies = [0.9, 1.1]
            axis = [-0.9, 0.0, 0.9]
            velocities = [(a, b) for a in axis for b in axis]
            widths = (0.2, 0.6, 0.6)
        else:
            raise UnsupportedDimension(f"No default panel for d = {dimension}")
        functions = [
            BumpFunction(center=(e,) + v, width=widths, smoothness=smoothness)
            for e in energies
            for v in velocities
        ]
        return cls(functions=functions, energy_scale=energy_scale)

    def at(self, energy_scale: float) -> "TestFunctionPanel":
        return TestFunctionPanel(functions=self.functions, energy_scale=energy_scale)

    def __len__(self) -> int:
        return len(self.functions)

    def integrals(self, measure: EmpiricalMeasure) -> np.ndarray:
        return np.array([measure.integrate(f.scaled(self.energy_scale)) for f in self.functions])

    def support_box(self) -> np.ndarray:
        boxes = np.stack([f.support(self.energy_scale) for f in self.functions])
        return np.column_stack([boxes[:, :, 0].min(axis=0), boxes[:, :, 1].max(axis=0)])

    def in_support(self, measure: EmpiricalMeasure) -> np.ndarray:
        """Mask of atoms inside the support of at least one function."""
        mask = np.zeros(len(measure), dtype=bool)
        for f in self.functions:
            box = f.support(self.energy_scale)
            mask |= np.all((measure.points > box[:, 0]) & (measure.points < box[:, 1]), axis=1)
        return mask


def quantum_measure(
    potential: FourierSeries,
    hbar: float,
    interval: Tuple[float, float],
    k_grid: Union[int, np.ndarray],
    cutoff: Optional[int] = None,
    workers: int = 1,
    cache: Optional[BandCache] = None,
) -> EmpiricalMeasure:
    """nu^hbar over I from a band sweep on a uniform Brillouin grid

    Degenerate bands carry velocity 0. The total mass tends to vol(P_I).
    """
    lattice = potential.lattice
    d = lattice.dimension
    a, b = interval
    if np.isscalar(k_grid):
        k_points = brillouin_grid(lattice, int(k_grid))
    else:
        k_points = np.asarray(k_grid, dtype=float).reshape(-1, d)
    cutoff = cutoff or resolving_cutoff(potential, hbar, b)
    table = band_sweep(potential, hbar, k_points, cutoff=cutoff, energy_max=b, strict=False,
                       workers=workers, cache=cache)

    values = table.eigenvalues
    inside = table.valid & (values >= a) & (values <= b)
    energies = values[inside]
    velocities = np.where(table.degenerate[inside][:, None], 0.0, table.velocities[inside])
    mass = (TWO_PI * hbar) ** d / len(k_points)
    unconverged = int(np.sum(inside & ~table.converged))
    if unconverged:
        logger.info("Unconverged bands in quantum measure", hbar=hbar, count=unconverged)
    return EmpiricalMeasure(
        weights=np.full(len(energies), mass),
        points=np.column_stack([energies, velocities]),
        kind=MeasureKind.QUANTUM,
        metadata={"hbar": hbar, "n_k": len(k_points), "cutoff": table.cutoff,
                  "unconverged_bands": unconverged, "cached": table.cached},
    )


def panel_error_bars(measure: EmpiricalMeasure, panel: TestFunctionPanel) -> np.ndarray:
    """Monte-Carlo standard errors vol std(f) / sqrt(n) (+) |int f| sigma_vol / vol

    Quantum and quadrature measures are deterministic and get zero error bars.
    """
    if measure.kind is not MeasureKind.MONTE_CARLO or len(measure) == 0:
        return np.zeros(len(panel))
    n = len(measure)
    volume = measure.total_mass
    errors = []
    for f in panel.functions:
        values = f.scaled(panel.energy_scale)(measure.energies, measure.velocities)
        integral = volume * float(np.mean(values))
        sampling = volume * float(np.std(values, ddof=1 if n > 1 else 0)) / np.sqrt(n)
        normalisation = abs(integral) * measure.volume_stderr / volume if volume else 0.0
        errors.append(float(np.hypot(sampling, normalisation)))
    return np.asarray(errors)


@dataclass
class ComparisonReport:
    """Panel integrals of two measures and their distances"""
    energy_scale: float
    integrals_a: np.ndarray
    integrals_b: np.ndarray
    error_bars: np.ndarray
    wasserstein: Optional[float]
    mass_a: float
    mass_b: float
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def discrepancies(self) -> np.ndarray:
        return np.abs(self.integrals_a - self.integrals_b)

    @property
    def discrepancy(self) -> float:
        return float(np.max(self.discrepancies)) if len(self.discrepancies) else 0.0

    def within_error(self, factor: float = 2.0, floor: float = 0.0) -> bool:
        return bool(np.all(self.discrepancies <= factor * self.error_bars + floor))


def _restricted(measure: EmpiricalMeasure, panel: TestFunctionPanel) -> Tuple[np.ndarray, np.ndarray]:
    """Normalised atoms inside the panel support box, in scaled variables."""
    box = panel.support_box()
    mask = np.all((measure.points >= box[:, 0]) & (measure.points <= box[:, 1]), axis=1)
    weights = measure.weights[mask]
    total = float(np.sum(weights))
    points = measure.points[mask]
    scale = np.array([panel.energy_scale] + [np.sqrt(panel.energy_scale)] * measure.dimension)
    return (weights / total if total > 0 else weights), points / scale


def _thinned(weights: np.ndarray, points: np.ndarray, max_atoms: int) -> Tuple[np.ndarray, np.ndarray]:
    """Merge atoms into max_atoms consecutive groups along lexicographic order."""
    if len(weights) <= max_atoms:
        return weights, points
    order = np.lexsort(points.T[::-1])
    groups = np.array_split(order, max_atoms)
    merged_w = np.array([weights[g].sum() for g in groups])
    merged_p = np.array([np.average(points[g], axis=0, weights=weights[g]) if weights[g].sum() > 0
                         else points[g].mean(axis=0) for g in groups])
    return merged_w, merged_p


def wasserstein_velocity(mu_a: EmpiricalMeasure, mu_b: EmpiricalMeasure, panel: TestFunctionPanel,
                         max_atoms: int = 2000) -> Optional[float]:
    """W1 between the scaled velocity marginals restricted to the panel support"""
    wa, pa = _restricted(mu_a, panel)
    wb, pb = _restricted(mu_b, panel)
    if wa.sum() <= 0 or wb.sum() <= 0:
        return None
    va, vb = pa[:, 1:], pb[:, 1:]
    if mu_a.dimension == 1:
        return float(ot.emd2_1d(va[:, 0], vb[:, 0], wa, wb, metric="euclidean"))
    wa, va = _thinned(wa, va, max_atoms)
    wb, vb = _thinned(wb, vb, max_atoms)
    cost = ot.dist(va, vb, metric="euclidean")
    return float(ot.emd2(wa / wa.sum(), wb / wb.sum(), cost))


def weak_star_distance(
    mu_a: EmpiricalMeasure,
    mu_b: EmpiricalMeasure,
    panel: TestFunctionPanel,
    max_atoms: int = 2000,
) -> ComparisonReport:
    """Panel discrepancies between two measures at the panel's energy scale

    Raises:
        EmptyOverlap: a measure has no atom inside the panel support
    """
    if mu_a.dimension != mu_b.dimension:
        raise UnsupportedDimension(f"Measures live in d = {mu_a.dimension} and d = {mu_b.dimension}")
    for name, mu in (("first", mu_a), ("second", mu_b)):
        if not np.any(panel.in_support(mu)):
            raise EmptyOverlap(f"The {name} measure has no atoms inside the panel support "
                               f"at energy scale {panel.energy_scale:g}")
    integrals_a = panel.integrals(mu_a)
    integrals_b = panel.integrals(mu_b)
    errors = np.hypot(panel_error_bars(mu_a, panel), panel_error_bars(mu_b, panel))
    report = ComparisonReport(
        energy_scale=panel.energy_scale,
        integrals_a=integrals_a,
        integrals_b=integrals_b,
        error_bars=errors,
        wasserstein=wasserstein_velocity(mu_a, mu_b, panel, max_atoms=max_atoms),
        mass_a=mu_a.total_mass,
        mass_b=mu_b.total_mass,
        metadata={
            "kinds": [str(mu_a.kind.value), str(mu_b.kind.value)],
            "atoms": [len(mu_a), len(mu_b)],
            "unconverged_fraction": max(mu_a.unconverged_fraction, mu_b.unconverged_fraction),
        },
    )
    logger.debug("Measures compared", energy=panel.energy_scale, discrepancy=report.discrepancy,
                 wasserstein=report.wasserstein)
    return report


def classical_side(
    potential: FourierSeries,
    interval: Tuple[float, float],
    method: ClassicalMethod,
    n_samples: int,
    T: float,
    dt: float,
    seed: Optional[int],
    tol: float = 1e-3,
    n_energy_cells: int = 64,
    workers: int = 1,
) -> EmpiricalMeasure:
    """Classical measure by quadrature (d = 1) or Monte-Carlo sampling

    Raises:
        ConfigError: Monte-Carlo sampling without a seed
    """
    if method is ClassicalMethod.QUADRATURE:
        return classical_measure_quadrature(potential, interval, n_energy_cells=n_energy_cells)
    if seed is None:
        raise ConfigError("Monte-Carlo measures need a seed")
    return classical_measure(potential, interval, n_samples, T, dt, seed, tol=tol, workers=workers)


@dataclass
class SweepCell:
    energy: float
    hbar: float
    status: str
    discrepancy: float = float("nan")
    mass_q: float = float("nan")
    mass_c: float = float("nan")
    unconverged_fraction: float = float("nan")
    wasserstein: Optional[float] = None
    error: str = ""


@dataclass
class SweepReport:
    """Discrepancy table over (E, hbar) and the trend in E"""
    cells: List[SweepCell]
    energies: List[float]
    discrepancy_by_energy: Dict[float, float]
    hbar_trend: Dict[float, float]
    fit: PowerLawFit
    scaled_ratio: Optional[float]
    at_floor: bool
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def failed(self) -> List[SweepCell]:
        return [c for c in self.cells if c.status != "ok"]

    def scaled_discrepancies(self) -> Dict[float, float]:
        """discrepancy(E) sqrt(E)"""
        return {E: v * np.sqrt(E) for E, v in self.discrepancy_by_energy.items()}

    def plot_data(self) -> np.ndarray:
        """Rows (E, discrepancy(E)) for external plotting."""
        return np.array(sorted(self.discrepancy_by_energy.items()), dtype=float).reshape(-1, 2)


def high_energy_sweep(
    potential: FourierSeries,
    energies: Sequence[float],
    hbars: Union[Sequence[float], Dict[float, Sequence[float]]],
    panel: TestFunctionPanel,
    delta: float = 0.1,
    k_grid: int = 64,
    method: ClassicalMethod = ClassicalMethod.QUADRATURE,
    n_samples: int = 2000,
    T: float = 1e3,
    dt: float = 1e-2,
    seed: Optional[int] = None,
    tol: float = 1e-3,
    n_energy_cells: int = 64,
    error_floor: float = 1e-10,
    max_atoms: int = 2000,
    workers: int = 1,
    cache: Optional[BandCache] = None,
) -> SweepReport:
    """Panel discrepancy at each energy for decreasing hbar, and its trend in E

    discrepancy(E) is the value at the smallest hbar with a successful cell;
    the difference to the next larger hbar is reported as the hbar-trend.
    Failed cells are recorded, not raised.

    Raises:
        ConfigError: energies not increasing, or Monte-Carlo sampling without a seed
    """
    energies = [float(E) for E in energies]
    if any(b <= a for a, b in zip(energies, energies[1:])):
        raise ConfigError("Sweep energies must be strictly increasing")
    if method is ClassicalMethod.MONTE_CARLO and seed is None:
        raise ConfigError("Monte-Carlo measures need a seed")
    per_energy = {E: sorted((float(h) for h in (hbars[E] if isinstance(hbars, dict) else hbars)), reverse=True)
                  for E in energies}

    classical: Dict[float, Optional[EmpiricalMeasure]] = {}
    classical_errors: Dict[float, str] = {}
    for E in energies:
        interval = ((1.0 - delta) * E, (1.0 + delta) * E)
        try:
            classical[E] = classical_side(potential, interval, method, n_samples, T, dt, seed, tol=tol,
                                          n_energy_cells=n_energy_cells, workers=workers)
        except BlochKamError as e:
            logger.warning("Classical measure failed", energy=E, error=e.code)
            classical[E], classical_errors[E] = None, f"{e.code}: {e}"

    items = [(E, h) for E in energies for h in per_energy[E]]

    def run_cell(item: Tuple[float, float]) -> SweepCell:
        E, hbar = item
        if classical[E] is None:
            return SweepCell(energy=E, hbar=hbar, status="failed", error=classical_errors[E])
        interval = ((1.0 - delta) * E, (1.0 + delta) * E)
        try:
            quantum = quantum_measure(potential, hbar, interval, k_grid, cache=cache)
            report = weak_star_distance(quantum, classical[E], panel.at(E), max_atoms=max_atoms)
        except BlochKamError as e:
            logger.warning("Sweep cell failed", energy=E, hbar=hbar, error=e.code)
            return SweepCell(energy=E, hbar=hbar, status="failed", error=f"{e.code}: {e}")
        return SweepCell(
            energy=E,
            hbar=hbar,
            status="ok",
            discrepancy=report.discrepancy,
            mass_q=report.mass_a,
            mass_c=report.mass_b,
            unconverged_fraction=report.metadata["unconverged_fraction"],
            wasserstein=report.wasserstein,
        )

    if workers > 1:
        cells = list(BatchRunner(max_concurrent=workers).run(run_cell, items).results)
    else:
        cells = [run_cell(item) for item in items]

    by_energy: Dict[float, float] = {}
    trend: Dict[float, float] = {}
    for E in energies:
        ok = sorted((c for c in cells if c.energy == E and c.status == "ok"), key=lambda c: c.hbar)
        if not ok:
            continue
        by_energy[E] = ok[0].discrepancy
        if len(ok) > 1:
            trend[E] = ok[1].discrepancy - ok[0].discrepancy

    values = np.array(list(by_energy.values()))
    at_floor = bool(len(values)) and bool(np.all(values <= error_floor))
    if at_floor:
        fit = skipped_fit(f"all discrepancies at or below the floor {error_floor:g}", len(values))
    else:
        fit = fit_power_law(list(by_energy.keys()), list(by_energy.values()), floor=error_floor)

    scaled = [v * np.sqrt(E) for E, v in by_energy.items() if v > error_floor]
    ratio = float(max(scaled) / min(scaled)) if len(scaled) > 1 else None
    logger.info("High-energy sweep finished", energies=energies, slope=fit.slope, ratio=ratio)
    return SweepReport(
        cells=cells,
        energies=energies,
        discrepancy_by_energy=by_energy,
        hbar_trend=trend,
        fit=fit,
        scaled_ratio=ratio,
        at_floor=at_floor,
        metadata={"delta": delta, "k_grid": k_grid, "method": method.value,
                  "limsup": "smallest feasible hbar per energy"},
    )
