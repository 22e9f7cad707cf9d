"""
Bloch fibers, band spectra and Weyl counts

The fiber H(k) = (D + hbar k)^2 / 2 + V acts on lattice-periodic functions and
is diagonal in plane waves exp(i <B* m, q>) apart from the potential. In the
integer labels m the kinetic entry is hbar^2 <m + kappa, M (m + kappa)> / 2,
where kappa = L^T k are the reduced coordinates of k.

The basis is the box ||m + round(kappa)||_inf <= cutoff, so shifting k by a
dual-lattice vector permutes the basis exactly.
"""

from dataclasses import dataclass, field
from functools import cached_property
from typing import List, Optional, Sequence, Tuple

import numpy as np
import structlog
from scipy import linalg

from ..batch import parallel_map
from ..cache import BandCache
from ..errors import CutoffTooSmall, EigensolverFailure
from ..fits.regression import PowerLawFit, fit_power_law
from ..lattice.core import TWO_PI, FourierSeries, Lattice, box_labels

logger = structlog.get_logger(__name__)

CONVERGENCE_EXTRA_MODES = 8
CONVERGENCE_RTOL = 1e-8
DEGENERACY_RTOL = 1e-10
DEGENERACY_ATOL = 1e-12
UNIT_BALL_VOLUME = {1: 2.0, 2: np.pi}
BASIS_SPREAD = {1: 2.0, 2: 1.5}
DENSE_APPLY_LIMIT = 4096


@dataclass(frozen=True, eq=False)
class BlochHamiltonian:
    """Truncated matrix of H(k) in plane waves"""

    potential: FourierSeries
    hbar: float
    k: np.ndarray
    cutoff: int

    @property
    def lattice(self) -> Lattice:
        return self.potential.lattice

    @property
    def dimension(self) -> int:
        return self.lattice.dimension

    @cached_property
    def kappa(self) -> np.ndarray:
        return np.atleast_1d(self.lattice.reduced_momentum(np.atleast_1d(self.k)))

    @cached_property
    def modes(self) -> np.ndarray:
        """Basis labels sorted by |l* + k|, then lexicographically."""
        d = self.dimension
        center = -np.round(self.kappa).astype(int)
        labels = box_labels(d, self.cutoff, center=center)
        shifted = labels + self.kappa
        norms = np.round(np.einsum("ni,ij,nj->n", shifted, self.lattice.M, shifted), 12)
        order = np.lexsort(tuple(labels[:, i] for i in reversed(range(d))) + (norms,))
        return labels[order]

    @cached_property
    def shifted_modes(self) -> np.ndarray:
        return self.modes + self.kappa

    @cached_property
    def kinetic(self) -> np.ndarray:
        s = self.shifted_modes
        return 0.5 * self.hbar**2 * np.einsum("ni,ij,nj->n", s, self.lattice.M, s)

    @property
    def size(self) -> int:
        return len(self.modes)

    @cached_property
    def matrix(self) -> np.ndarray:
        modes = self.modes
        K = self.potential.cutoff
        diffs = modes[:, None, :] - modes[None, :, :]
        inside = np.all(np.abs(diffs) <= K, axis=-1)
        clipped = np.clip(diffs, -K, K) + K
        values = self.potential.dense[tuple(clipped[..., i] for i in range(self.dimension))]
        H = np.where(inside, values, 0.0).astype(complex)
        H[np.diag_indices_from(H)] += self.kinetic
        return H

    def apply(self, vector: np.ndarray) -> np.ndarray:
        """H(k) vector; large bases convolve with V by FFT instead of forming the matrix."""
        if self.size <= DENSE_APPLY_LIMIT:
            return self.matrix @ vector
        d = self.dimension
        K = self.potential.cutoff
        n = int(2 ** np.ceil(np.log2(2 * self.cutoff + 2 * K + 2)))
        center = -np.round(self.kappa).astype(int)
        index = tuple(((self.modes - center) % n)[:, i] for i in range(d))
        grid = np.zeros((n,) * d, dtype=complex)
        grid[index] = vector
        psi = np.fft.ifftn(grid) * n**d
        V = np.zeros((n,) * d, dtype=complex)
        labels = box_labels(d, K)
        V[tuple((labels % n)[:, i] for i in range(d))] = self.potential.dense.reshape(-1)
        potential_values = np.fft.ifftn(V) * n**d
        product = np.fft.fftn(potential_values * psi) / n**d
        return product[index] + self.kinetic * vector

    @property
    def boundary_kinetic(self) -> float:
        """Smallest kinetic energy among the outermost basis shell."""
        center = -np.round(self.kappa).astype(int)
        on_edge = np.max(np.abs(self.modes - center), axis=1) == self.cutoff
        return float(np.min(self.kinetic[on_edge]))

    @property
    def resolved_energy(self) -> float:
        """Energy below which truncation cannot hide eigenvalues."""
        v_min, v_max = self.potential.extrema
        return v_min + self.boundary_kinetic - (v_max - v_min)


@dataclass
class BandSpectrum:
    """Lowest eigenpairs of one Bloch fiber"""
    hbar: float
    k: np.ndarray
    kappa: np.ndarray
    lattice: Lattice
    cutoff: int
    modes: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    group_velocities: np.ndarray
    converged: np.ndarray
    degenerate: np.ndarray
    next_eigenvalue: float = float("inf")
    resolved_energy: float = float("inf")

    def __len__(self) -> int:
        return len(self.eigenvalues)

    @property
    def n_bands(self) -> int:
        return len(self.eigenvalues)

    def group_velocity(self, n: int) -> np.ndarray:
        return group_velocity(self, n)


def _eigh(matrix: np.ndarray, n: int, eigvals_only: bool = False):
    try:
        return linalg.eigh(matrix, subset_by_index=[0, n - 1], eigvals_only=eigvals_only,
                           check_finite=False)
    except (linalg.LinAlgError, ValueError) as e:
        raise EigensolverFailure(f"Hermitian eigensolver failed: {e}") from e


def _degenerate_flags(values: np.ndarray, n: int) -> np.ndarray:
    """Band i is degenerate when a neighbour lies within the relative gap."""
    flags = np.zeros(n, dtype=bool)
    for i in range(n):
        threshold = DEGENERACY_RTOL * abs(values[i]) + DEGENERACY_ATOL
        below = i > 0 and values[i] - values[i - 1] <= threshold
        above = i + 1 < len(values) and values[i + 1] - values[i] <= threshold
        flags[i] = below or above
    return flags


def count_below(ham: BlochHamiltonian, energy_max: float) -> int:
    try:
        values = linalg.eigh(ham.matrix, eigvals_only=True, subset_by_value=(-np.inf, energy_max),
                             check_finite=False)
    except (linalg.LinAlgError, ValueError) as e:
        raise EigensolverFailure(f"Hermitian eigensolver failed: {e}") from e
    return int(len(values))


def solve_bands(
    potential: FourierSeries,
    hbar: float,
    k,
    cutoff: int,
    n_bands: Optional[int] = None,
    energy_max: Optional[float] = None,
    strict: bool = True,
    check_convergence: bool = True,
) -> BandSpectrum:
    """First eigenpairs of the truncated fiber H(k)

    Args:
        potential: Potential series (Hermitian)
        hbar: Semiclassical parameter, > 0
        k: Quasi-momentum in cartesian components
        cutoff: Basis box half-width
        n_bands: Number of bands; ignored when energy_max is given
        energy_max: Return every band with E_n <= energy_max instead
        strict: Raise CutoffTooSmall when a band fails the convergence check
        check_convergence: Compare with a cutoff + 8 recomputation

    Raises:
        CutoffTooSmall: n_bands >= half the basis, or unconverged bands in strict mode
        EigensolverFailure: the dense solver failed
    """
    if hbar <= 0:
        raise ValueError(f"hbar must be > 0, got {hbar}")
    ham = BlochHamiltonian(potential=potential, hbar=hbar, k=np.atleast_1d(np.asarray(k, dtype=float)),
                           cutoff=int(cutoff))
    if energy_max is not None:
        n_bands = count_below(ham, energy_max)
    if n_bands is None:
        raise ValueError("Either n_bands or energy_max is required")
    if n_bands >= 0.5 * ham.size:
        raise CutoffTooSmall(
            f"{n_bands} bands need more than half of the {ham.size} basis states; raise the cutoff"
        )

    d = ham.dimension
    if n_bands == 0:
        empty = np.zeros(0)
        return BandSpectrum(
            hbar=hbar, k=ham.k, kappa=ham.kappa, lattice=ham.lattice, cutoff=ham.cutoff,
            modes=ham.modes, eigenvalues=empty, eigenvectors=np.zeros((ham.size, 0), complex),
            group_velocities=np.zeros((0, d)), converged=np.zeros(0, bool),
            degenerate=np.zeros(0, bool), resolved_energy=ham.resolved_energy,
        )

    values, vectors = _eigh(ham.matrix, n_bands + 1)
    eigenvalues = values[:n_bands]
    eigenvectors = vectors[:, :n_bands]

    converged = np.ones(n_bands, dtype=bool)
    if check_convergence:
        larger = BlochHamiltonian(potential=potential, hbar=hbar, k=ham.k,
                                  cutoff=ham.cutoff + CONVERGENCE_EXTRA_MODES)
        reference = _eigh(larger.matrix, n_bands, eigvals_only=True)
        change = np.abs(eigenvalues - reference)
        converged = change <= CONVERGENCE_RTOL * np.maximum(1.0, np.abs(eigenvalues))
        if not np.all(converged):
            worst = int(np.argmax(change))
            logger.debug("Bands not converged", hbar=hbar, cutoff=cutoff, band=worst,
                         change=float(change[worst]))
            if strict:
                raise CutoffTooSmall(
                    f"Band {worst} changed by {change[worst]:.3e} between cutoff {cutoff} "
                    f"and {cutoff + CONVERGENCE_EXTRA_MODES}"
                )

    degenerate = _degenerate_flags(values, n_bands)
    weights = np.abs(eigenvectors) ** 2
    mean_modes = weights.T @ ham.shifted_modes
    velocities = hbar * (mean_modes @ ham.lattice.dual_basis.T)
    velocities[degenerate] = 0.0

    return BandSpectrum(
        hbar=hbar,
        k=ham.k,
        kappa=ham.kappa,
        lattice=ham.lattice,
        cutoff=ham.cutoff,
        modes=ham.modes,
        eigenvalues=eigenvalues,
        eigenvectors=eigenvectors,
        group_velocities=velocities,
        converged=converged,
        degenerate=degenerate,
        next_eigenvalue=float(values[n_bands]),
        resolved_energy=ham.resolved_energy,
    )


def group_velocity(spec: BandSpectrum, n: int) -> np.ndarray:
    """hbar^{-1} grad_k E_n by the expectation of (D + hbar k); 0 on degenerate bands"""
    if spec.degenerate[n]:
        return np.zeros(spec.lattice.dimension)
    return spec.group_velocities[n]


def resolving_cutoff(potential: FourierSeries, hbar: float, energy_max: float) -> int:
    """Smallest box half-width whose resolved energy exceeds energy_max

    The box is also wide enough that the bands below energy_max fill less
    than half of it.
    """
    lattice = potential.lattice
    v_min, v_max = potential.extrema
    pad = 2.0 * (v_max - v_min) + 1.0
    lam = float(np.min(np.linalg.eigvalsh(lattice.M)))
    radius = np.sqrt(2.0 * max(energy_max - v_min + pad, 0.0) / lam) / hbar
    ball = BASIS_SPREAD[lattice.dimension] * np.sqrt(2.0 * max(energy_max - v_min, 0.0) / lam) / hbar
    return int(np.ceil(max(radius, ball) + 0.5)) + 4


def brillouin_grid(lattice: Lattice, n: int, offset: bool = True) -> np.ndarray:
    """Monkhorst-style grid over the Brillouin cell, cartesian rows

    With the half-cell offset kappa_j = (j + 1/2)/n - 1/2, which is symmetric
    under k -> -k and avoids the symmetry points 0 and 1/2.
    """
    j = np.arange(n)
    axis = (j + 0.5) / n - 0.5 if offset else j / n - 0.5
    d = lattice.dimension
    kappa = np.stack(np.meshgrid(*([axis] * d), indexing="ij"), axis=-1).reshape(-1, d)
    return kappa @ lattice.dual_basis.T


def phase_space_volume(potential: FourierSeries, interval: Tuple[float, float], n: Optional[int] = None) -> float:
    """vol H^{-1}(I) = |det B| mean_q omega_d [(2(b - V))_+^{d/2} - (2(a - V))_+^{d/2}]"""
    a, b = interval
    d = potential.dimension
    n = n or (4096 if d == 1 else 256)
    V = np.real(potential.on_grid(max(n, 2 * potential.cutoff + 1)))
    upper = np.maximum(2.0 * (b - V), 0.0) ** (d / 2)
    lower = np.maximum(2.0 * (a - V), 0.0) ** (d / 2)
    return float(potential.lattice.cell_volume * UNIT_BALL_VOLUME[d] * np.mean(upper - lower))


def shell_volume_constant(lattice: Lattice, delta: float) -> float:
    """c(delta) with vol(P_I) = c(delta) E^{d/2} for V = 0 and I = [(1-delta)E, (1+delta)E]"""
    d = lattice.dimension
    return float(
        lattice.cell_volume * UNIT_BALL_VOLUME[d] * 2 ** (d / 2)
        * ((1 + delta) ** (d / 2) - (1 - delta) ** (d / 2))
    )


@dataclass
class WeylCount:
    """Eigenvalue count in I against the Weyl prediction"""
    count: int
    weyl_prediction: float
    volume: float
    hbar: float
    cutoff: int
    dimension: int = 1

    @property
    def deviation(self) -> float:
        """|(2 pi hbar)^d count - vol(P_I)|"""
        return abs((TWO_PI * self.hbar) ** self.dimension * self.count - self.volume)


def weyl_count(
    potential: FourierSeries,
    hbar: float,
    k,
    interval: Tuple[float, float],
    cutoff: Optional[int] = None,
) -> WeylCount:
    """#{n : E_n(k) in I} and vol(P_I) / (2 pi hbar)^d

    Raises:
        CutoffTooSmall: count changes when the basis grows by 8 modes
    """
    a, b = interval
    d = potential.dimension
    volume = phase_space_volume(potential, interval)
    prediction = volume / (TWO_PI * hbar) ** d
    v_min, _ = potential.extrema
    if b <= v_min:
        return WeylCount(count=0, weyl_prediction=prediction, volume=volume, hbar=hbar, cutoff=0, dimension=d)

    cutoff = cutoff or resolving_cutoff(potential, hbar, b)
    k = np.atleast_1d(np.asarray(k, dtype=float))
    counts = []
    for c in (cutoff, cutoff + CONVERGENCE_EXTRA_MODES):
        ham = BlochHamiltonian(potential=potential, hbar=hbar, k=k, cutoff=c)
        counts.append(count_below(ham, b) - count_below(ham, np.nextafter(a, -np.inf)))
    if counts[0] != counts[1]:
        raise CutoffTooSmall(f"Eigenvalue count in I changed from {counts[0]} to {counts[1]} with the cutoff")
    logger.debug("Weyl count", hbar=hbar, count=counts[0], prediction=prediction)
    return WeylCount(count=counts[0], weyl_prediction=prediction, volume=volume, hbar=hbar, cutoff=cutoff, dimension=d)


@dataclass
class WeylScalingReport:
    """Weyl error across an hbar sweep and its log-log fit"""
    hbars: List[float]
    counts: List[List[int]]
    deviations: List[float]
    volume: float
    fit: PowerLawFit


def weyl_scaling_fit(
    potential: FourierSeries,
    hbars: Sequence[float],
    k_points,
    interval: Tuple[float, float],
) -> WeylScalingReport:
    """Fit |(2 pi hbar)^d <count>_k - vol(P_I)| ~ hbar^slope"""
    d = potential.dimension
    k_points = np.atleast_2d(np.asarray(k_points, dtype=float).reshape(-1, d))
    volume = phase_space_volume(potential, interval)
    counts, deviations = [], []
    for hbar in hbars:
        per_k = [weyl_count(potential, hbar, k, interval).count for k in k_points]
        counts.append(per_k)
        deviations.append(abs((TWO_PI * hbar) ** d * float(np.mean(per_k)) - volume))
    fit = fit_power_law(hbars, deviations)
    return WeylScalingReport(hbars=list(hbars), counts=counts, deviations=deviations, volume=volume, fit=fit)


@dataclass
class BandTable:
    """Band energies and group velocities over a k-grid (NaN-padded)"""
    hbar: float
    k_points: np.ndarray
    eigenvalues: np.ndarray
    velocities: np.ndarray
    converged: np.ndarray
    degenerate: np.ndarray
    cutoff: int
    cached: bool = False
    spectra: List[BandSpectrum] = field(default_factory=list, repr=False)

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.eigenvalues)

    def to_arrays(self) -> dict:
        return {
            "hbar": np.asarray(self.hbar),
            "k_points": self.k_points,
            "eigenvalues": self.eigenvalues,
            "velocities": self.velocities,
            "converged": self.converged,
            "degenerate": self.degenerate,
            "cutoff": np.asarray(self.cutoff),
        }

    @classmethod
    def from_arrays(cls, arrays: dict) -> "BandTable":
        return cls(
            hbar=float(arrays["hbar"]),
            k_points=arrays["k_points"],
            eigenvalues=arrays["eigenvalues"],
            velocities=arrays["velocities"],
            converged=arrays["converged"].astype(bool),
            degenerate=arrays["degenerate"].astype(bool),
            cutoff=int(arrays["cutoff"]),
            cached=True,
        )


def band_sweep(
    potential: FourierSeries,
    hbar: float,
    k_points,
    cutoff: Optional[int] = None,
    n_bands: Optional[int] = None,
    energy_max: Optional[float] = None,
    strict: bool = True,
    workers: int = 1,
    cache: Optional[BandCache] = None,
) -> BandTable:
    """solve_bands over every k-point, merged by k-index"""
    d = potential.dimension
    k_points = np.atleast_2d(np.asarray(k_points, dtype=float).reshape(-1, d))
    if cutoff is None:
        if energy_max is None:
            raise ValueError("band_sweep needs a cutoff or an energy_max")
        cutoff = resolving_cutoff(potential, hbar, energy_max)

    selection = {"n_bands": n_bands, "energy_max": energy_max, "strict": strict}
    key = None
    if cache is not None:
        key = BandCache.key(potential.digest(), hbar, cutoff, k_points, selection)
        arrays = cache.load(key)
        if arrays is not None:
            return BandTable.from_arrays(arrays)

    def solve(k: np.ndarray) -> BandSpectrum:
        return solve_bands(potential, hbar, k, cutoff, n_bands=n_bands, energy_max=energy_max, strict=strict)

    spectra = parallel_map(solve, list(k_points), workers=workers)
    width = max((s.n_bands for s in spectra), default=0)
    nk = len(k_points)
    eigenvalues = np.full((nk, width), np.nan)
    velocities = np.full((nk, width, d), np.nan)
    converged = np.zeros((nk, width), dtype=bool)
    degenerate = np.zeros((nk, width), dtype=bool)
    for i, spec in enumerate(spectra):
        n = spec.n_bands
        eigenvalues[i, :n] = spec.eigenvalues
        velocities[i, :n] = spec.group_velocities
        converged[i, :n] = spec.converged
        degenerate[i, :n] = spec.degenerate

    table = BandTable(
        hbar=hbar, k_points=k_points, eigenvalues=eigenvalues, velocities=velocities,
        converged=converged, degenerate=degenerate, cutoff=cutoff, spectra=spectra,
    )
    if cache is not None and key is not None:
        cache.store(key, table.to_arrays())
    return table
