"""
Admissible labels, eigenpair matching and separation sets

A label m is admissible at (k, hbar) when the Bloch action hbar (m + kappa)
lies within hbar^alpha of an accepted KAM action. Assembled quasimodes are
matched against the exact fiber spectrum: the nearest eigenvalue is always
within the residual, and on a window holding a single eigenvalue the
eigenvector is close to the quasimode up to phase.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog

from ..batch import parallel_map
from ..errors import WindowUnresolved
from ..kam.family import TorusFamily
from ..lattice.core import torus_grid
from ..spectra.bloch import BandSpectrum, group_velocity, resolving_cutoff, solve_bands
from .builder import Quasimode, assemble_quasimode, leading_amplitude

logger = structlog.get_logger(__name__)

BOUND_SLACK = 1e-12

Label = Tuple[int, ...]


@dataclass
class AdmissibleSet:
    """Labels m with dist(hbar (m + kappa), accepted actions) <= hbar^alpha"""
    k: np.ndarray
    hbar: float
    alpha: float
    labels: np.ndarray
    actions: np.ndarray
    distances: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def members(self) -> List[Label]:
        return [tuple(int(v) for v in m) for m in self.labels]


def admissible_momenta(k, hbar: float, alpha: float, family: TorusFamily) -> AdmissibleSet:
    """Scan the action bounding box of the shell for admissible Bloch labels"""
    lattice = family.potential.lattice
    d = lattice.dimension
    k = np.atleast_1d(np.asarray(k, dtype=float))
    kappa = np.atleast_1d(lattice.reduced_momentum(k))
    empty = AdmissibleSet(k=k, hbar=hbar, alpha=alpha, labels=np.zeros((0, d), dtype=int),
                          actions=np.zeros((0, d)), distances=np.zeros(0))
    if family.is_empty:
        return empty

    box = family.action_box()
    low = np.ceil(-box / hbar - kappa).astype(int)
    high = np.floor(box / hbar - kappa).astype(int)
    if np.any(high < low):
        return empty
    axes = [np.arange(lo, hi + 1) for lo, hi in zip(low, high)]
    labels = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    actions = hbar * (labels + kappa)
    distances = family.distance(actions)
    keep = distances <= hbar**alpha
    logger.debug("Admissible labels", hbar=hbar, scanned=len(labels), admitted=int(np.sum(keep)))
    return AdmissibleSet(k=k, hbar=hbar, alpha=alpha, labels=labels[keep], actions=actions[keep],
                         distances=distances[keep])


def build_quasimodes(
    family: TorusFamily,
    admissible: AdmissibleSet,
    order: int,
    n_grid: Optional[int] = None,
    workers: int = 1,
) -> List[Quasimode]:
    """Assemble one quasimode per admissible label, in label order."""

    def build(label: Label) -> Quasimode:
        return assemble_quasimode(family, label, admissible.k, admissible.hbar, order, n_grid=n_grid)

    return parallel_map(build, admissible.members, workers=workers)


def spectrum_for(quasimodes: Sequence[Quasimode], window: float, strict: bool = False) -> BandSpectrum:
    """Fiber spectrum resolving every band up to max E~ + window"""
    first = quasimodes[0]
    top = max(qm.energy for qm in quasimodes) + window
    cutoff = max(max(qm.cutoff for qm in quasimodes), resolving_cutoff(first.potential, first.hbar, top))
    return solve_bands(first.potential, first.hbar, first.k, cutoff, energy_max=top, strict=strict)


def _aligned(qm: Quasimode, spectrum: BandSpectrum) -> np.ndarray:
    """Quasimode coefficients in the basis order of the spectrum."""
    index: Dict[Label, int] = {tuple(int(v) for v in m): i for i, m in enumerate(qm.modes)}
    out = np.zeros(len(spectrum.modes), dtype=complex)
    for j, m in enumerate(spectrum.modes):
        i = index.get(tuple(int(v) for v in m))
        if i is not None:
            out[j] = qm.wavefunction[i]
    return out


def _require_window(spectrum: BandSpectrum, upper: float) -> None:
    covered = spectrum.next_eigenvalue
    if covered < upper or spectrum.resolved_energy < upper:
        raise WindowUnresolved(
            f"Spectrum resolves energies up to {min(covered, spectrum.resolved_energy):.6g}, "
            f"window needs {upper:.6g}; raise the cutoff"
        )


@dataclass
class MatchReport:
    """Nearest eigenpair of a quasimode and the certificates it satisfies"""
    label: Label
    energy: float
    residual_norm: float
    nearest_index: int
    nearest_energy: float
    spectral_distance: float
    window: float
    window_count: int
    overlap: Optional[float] = None
    aligned_distance: Optional[float] = None
    gap: Optional[float] = None
    eigenvector_bound: Optional[float] = None

    @property
    def distance_bound_holds(self) -> bool:
        return self.spectral_distance <= self.residual_norm + BOUND_SLACK

    @property
    def simple_window(self) -> bool:
        return self.window_count == 1

    @property
    def eigenvector_bound_holds(self) -> Optional[bool]:
        if self.eigenvector_bound is None:
            return None
        return self.aligned_distance <= self.eigenvector_bound + BOUND_SLACK


def _phase_aligned(psi_n: np.ndarray, psi: np.ndarray) -> Tuple[float, float]:
    inner = np.vdot(psi_n, psi)
    theta = np.angle(inner)
    return float(abs(inner)), float(np.linalg.norm(psi - np.exp(1j * theta) * psi_n))


def residual_and_match(qm: Quasimode, spectrum: BandSpectrum, window_exponent: float) -> MatchReport:
    """Match a quasimode with the spectrum inside the window E~ +- hbar^p

    Raises:
        WindowUnresolved: the spectrum stops short of E~ + hbar^p
    """
    window = qm.hbar**window_exponent
    _require_window(spectrum, qm.energy + window)
    values = spectrum.eigenvalues
    distances = np.abs(values - qm.energy)
    n = int(np.argmin(distances))
    inside = np.flatnonzero(distances <= window)
    report = MatchReport(
        label=qm.label,
        energy=qm.energy,
        residual_norm=qm.residual_norm,
        nearest_index=n,
        nearest_energy=float(values[n]),
        spectral_distance=float(distances[n]),
        window=window,
        window_count=len(inside),
    )
    if len(inside) == 1:
        psi = _aligned(qm, spectrum)
        report.overlap, report.aligned_distance = _phase_aligned(spectrum.eigenvectors[:, n], psi)
        others = np.append(np.delete(distances, n), abs(spectrum.next_eigenvalue - qm.energy))
        report.gap = float(np.min(others))
        report.eigenvector_bound = 2.0 * qm.residual_norm / report.gap
    if not report.distance_bound_holds:
        logger.warning("Spectral distance exceeds residual", label=qm.label,
                       distance=report.spectral_distance, residual=qm.residual_norm)
    return report


@dataclass
class SeparationMatch:
    index: int
    energy_error: float
    overlap: float
    aligned_distance: float
    bound: float

    @property
    def holds(self) -> bool:
        return self.aligned_distance <= self.bound + BOUND_SLACK


@dataclass
class SeparationReport:
    """Admissible labels, the separated subset and the simple-window subset"""
    hbar: float
    order: int
    labels: List[Label]
    separated: List[Label]
    simple: List[Label]
    matches: Dict[Label, SeparationMatch] = field(default_factory=dict)

    @property
    def injective(self) -> bool:
        indices = [m.index for m in self.matches.values()]
        return len(indices) == len(set(indices))

    @property
    def bound_violations(self) -> List[Label]:
        return [label for label, m in self.matches.items() if not m.holds]

    def summary(self) -> Dict[str, float]:
        return {
            "admissible": len(self.labels),
            "separated": len(self.separated),
            "simple": len(self.simple),
            "injective": self.injective,
            "violations": len(self.bound_violations),
        }


def separation_classify(quasimodes: Sequence[Quasimode], spectrum: BandSpectrum, hbar: float,
                        order: int) -> SeparationReport:
    """Split quasimodes into the energy-separated set and its simple-window subset

    A label is separated when its E~ is more than 2 hbar^N away from every
    other E~; a separated label is simple when E~ +- hbar^N holds exactly one
    eigenvalue. Simple labels are matched and checked against the distance
    bound 2 residual / hbar^N.
    """
    labels = [qm.label for qm in quasimodes]
    energies = np.array([qm.energy for qm in quasimodes])
    threshold = 2.0 * hbar**order
    window = hbar**order
    separated: List[Label] = []
    simple: List[Label] = []
    matches: Dict[Label, SeparationMatch] = {}
    for i, qm in enumerate(quasimodes):
        others = np.delete(energies, i)
        if len(others) and np.min(np.abs(others - qm.energy)) <= threshold:
            continue
        separated.append(qm.label)
        upper = qm.energy + window
        if spectrum.next_eigenvalue < upper or spectrum.resolved_energy < upper:
            logger.warning("Window not resolved, label left out of the simple set", label=qm.label)
            continue
        distances = np.abs(spectrum.eigenvalues - qm.energy)
        inside = np.flatnonzero(distances <= window)
        if len(inside) != 1:
            continue
        simple.append(qm.label)
        n = int(inside[0])
        overlap, aligned = _phase_aligned(spectrum.eigenvectors[:, n], _aligned(qm, spectrum))
        matches[qm.label] = SeparationMatch(
            index=n,
            energy_error=float(distances[n]),
            overlap=overlap,
            aligned_distance=aligned,
            bound=2.0 * qm.residual_norm / window,
        )
    report = SeparationReport(hbar=hbar, order=order, labels=labels, separated=separated, simple=simple,
                              matches=matches)
    logger.debug("Separation classified", **report.summary())
    return report


@dataclass
class VelocityReport:
    """Quasimode velocity against its classical counterparts (cartesian)"""
    expectation: np.ndarray
    classical: np.ndarray
    measure_average: np.ndarray
    proxy_residual: float
    projection_residual: Optional[float] = None

    @property
    def difference(self) -> float:
        return float(np.linalg.norm(self.expectation - self.classical))


def quasimode_velocity(qm: Quasimode, spectrum: Optional[BandSpectrum] = None) -> VelocityReport:
    """<psi, (D + hbar k) psi> with the torus velocity and the mu_P-average of the momentum

    With a spectrum the per-band version (sum_n |<psi_n, psi>|^2 |v_n - dK|^2)^(1/2)
    is reported as well.
    """
    lattice = qm.torus.lattice
    momenta = qm.hbar * ((qm.modes + qm.kappa) @ lattice.dual_basis.T)
    weights = np.abs(qm.wavefunction) ** 2
    expectation = weights @ momenta
    classical = qm.torus.velocity
    proxy = float(np.sqrt(weights @ np.sum((momenta - classical) ** 2, axis=1)))

    lead = leading_amplitude(qm.torus)
    n = lead.n_grid
    density = np.real(lead.density.on_grid(n)).reshape(-1)
    phi = torus_grid(lattice.dimension, n)
    J = qm.torus.generating.momentum(phi)
    average = (density @ J / len(density)) @ lattice.L_inv

    projection = None
    if spectrum is not None and len(spectrum):
        psi = _aligned(qm, spectrum)
        overlaps = np.abs(spectrum.eigenvectors.conj().T @ psi) ** 2
        bands = np.array([group_velocity(spectrum, i) for i in range(len(spectrum))])
        projection = float(np.sqrt(overlaps @ np.sum((bands - classical) ** 2, axis=1)))
    return VelocityReport(expectation=expectation, classical=classical, measure_average=average,
                          proxy_residual=proxy, projection_residual=projection)


@dataclass
class ProjectionDefect:
    defect: float
    bound: float

    @property
    def holds(self) -> bool:
        return self.defect <= self.bound + BOUND_SLACK


def projection_defect(qm: Quasimode, spectrum: BandSpectrum, window_exponent: float) -> ProjectionDefect:
    """||(1 - P) psi|| for the spectral projection on E~ +- hbar^p, against residual / hbar^p

    Raises:
        WindowUnresolved: the spectrum stops short of E~ + hbar^p
    """
    window = qm.hbar**window_exponent
    _require_window(spectrum, qm.energy + window)
    inside = np.flatnonzero(np.abs(spectrum.eigenvalues - qm.energy) < window)
    psi = _aligned(qm, spectrum)
    captured = float(np.sum(np.abs(spectrum.eigenvectors[:, inside].conj().T @ psi) ** 2))
    missing = max(float(np.linalg.norm(psi)) ** 2 - captured, 0.0)
    return ProjectionDefect(defect=float(np.sqrt(missing)), bound=qm.residual_norm / window)


def near_degeneracy_fraction(groups: Sequence[Sequence[Quasimode]], hbar: float, order: int) -> float:
    """Fraction of k-points whose quasimode energies contain a pair within 2 hbar^N"""
    if not groups:
        return 0.0
    threshold = 2.0 * hbar**order
    hits = 0
    for group in groups:
        energies = np.sort([qm.energy for qm in group])
        if len(energies) > 1 and np.min(np.diff(energies)) <= threshold:
            hits += 1
    return hits / len(groups)


@dataclass
class CountingBracket:
    """Bracket vol(K) - vol(K^c) - slack <= (2 pi hbar)^d <|F|> <= vol(K) + slack"""
    value: float
    lower: float
    upper: float
    relative: Optional[float] = None

    @property
    def inside(self) -> bool:
        return self.lower <= self.value <= self.upper


def counting_bracket(vol_kam: float, vol_complement: float, hbar: float, slack: float, mean_count: float,
                     dimension: int, shell_volume: Optional[float] = None) -> CountingBracket:
    value = (2.0 * np.pi * hbar) ** dimension * mean_count
    relative = abs(value / shell_volume - 1.0) if shell_volume else None
    return CountingBracket(value=value, lower=vol_kam - vol_complement - slack, upper=vol_kam + slack,
                           relative=relative)
