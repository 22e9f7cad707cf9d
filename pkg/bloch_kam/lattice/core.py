"""
Lattices, dual lattices and trigonometric series

A lattice is stored through its basis columns (l_1, ..., l_d). Every periodic
function on the torus R^d / L is a series over dual vectors l* = B* m with
integer labels m, and the same integer-indexed coefficients describe the
function in the standard angle coordinates phi = L^{-1} q, where L = B / 2pi.
Series are therefore stored as dense centred arrays over integer labels and
the torus FFT helpers below work entirely in standard coordinates.
"""

import hashlib
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Dict, Iterator, Optional, Tuple

import numpy as np
import structlog
from scipy.optimize import minimize

from ..errors import NonpositiveEnergy, PotentialFormatError, SingularBasis, UnsupportedDimension

logger = structlog.get_logger(__name__)

TWO_PI = 2.0 * np.pi
SUPPORTED_DIMENSIONS = (1, 2)
HERMITIAN_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class Lattice:
    """Configuration lattice with its dual and the matrices L and M"""

    basis: np.ndarray

    @property
    def dimension(self) -> int:
        return int(self.basis.shape[0])

    @cached_property
    def L(self) -> np.ndarray:
        return self.basis / TWO_PI

    @cached_property
    def L_inv(self) -> np.ndarray:
        return np.linalg.inv(self.L)

    @cached_property
    def M(self) -> np.ndarray:
        metric = np.linalg.inv(self.L.T @ self.L)
        return 0.5 * (metric + metric.T)

    @cached_property
    def M_inv(self) -> np.ndarray:
        return self.L.T @ self.L

    @cached_property
    def dual_basis(self) -> np.ndarray:
        """Columns l*_j with <l_i, l*_j> = 2pi delta_ij."""
        return TWO_PI * np.linalg.inv(self.basis).T

    @property
    def cell_volume(self) -> float:
        return float(abs(np.linalg.det(self.basis)))

    @property
    def is_standard(self) -> bool:
        return bool(np.allclose(self.basis, TWO_PI * np.eye(self.dimension)))

    def reduce_position(self, q: np.ndarray) -> np.ndarray:
        """Representative of q in the half-open cell spanned by the basis."""
        q = np.asarray(q, dtype=float)
        coords = q @ np.linalg.inv(self.basis).T
        coords = coords - np.floor(coords)
        coords[coords >= 1.0] = 0.0
        return coords @ self.basis.T

    def reduce_momentum(self, k: np.ndarray) -> np.ndarray:
        """Representative of k in the Brillouin cell centred at 0."""
        kappa = self.reduced_momentum(k)
        kappa = kappa - np.floor(kappa + 0.5)
        return kappa @ self.dual_basis.T

    def reduced_momentum(self, k: np.ndarray) -> np.ndarray:
        """Coordinates kappa of k in the dual basis (kappa = L^T k)."""
        return np.asarray(k, dtype=float) @ self.L

    def dual_vectors(self, labels: np.ndarray) -> np.ndarray:
        """Cartesian dual vectors B* m for integer labels (rows)."""
        return np.asarray(labels, dtype=float) @ self.dual_basis.T

    def to_standard(self, p: np.ndarray, q: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(p, q) -> (L^T p, L^{-1} q), the E = 1 ballistic map without reduction."""
        return np.asarray(p) @ self.L, np.asarray(q) @ self.L_inv.T

    def from_standard(self, J: np.ndarray, phi: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return np.asarray(J) @ self.L_inv, np.asarray(phi) @ self.L.T

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.basis, dtype=float).tobytes()).hexdigest()


def make_lattice(basis_columns) -> Lattice:
    """Build a lattice from its basis columns

    Raises:
        UnsupportedDimension: for d outside {1, 2} or a non-square basis
        SingularBasis: when |det| is below 1e-12 scale^d
    """
    basis = np.atleast_2d(np.asarray(basis_columns, dtype=float))
    if basis.ndim != 2 or basis.shape[0] != basis.shape[1]:
        raise UnsupportedDimension(f"Basis must be a square d x d matrix, got shape {basis.shape}")
    d = basis.shape[0]
    if d not in SUPPORTED_DIMENSIONS:
        raise UnsupportedDimension(f"Dimension {d} is not supported (only 1 and 2)")
    if not np.all(np.isfinite(basis)):
        raise SingularBasis("Basis contains non-finite entries")
    scale = float(np.max(np.abs(basis))) if basis.size else 0.0
    det = float(np.linalg.det(basis))
    if scale == 0.0 or abs(det) <= 1e-12 * scale**d:
        raise SingularBasis(f"Basis is singular (det={det:.3e})")
    return Lattice(basis=basis.copy())


def standard_lattice(d: int) -> Lattice:
    """The lattice 2pi Z^d, whose dual is Z^d."""
    return make_lattice(TWO_PI * np.eye(d))


def dual_lattice(lattice: Lattice) -> Lattice:
    return make_lattice(lattice.dual_basis)


# Integer-label helpers


def label_range(cutoff: int) -> np.ndarray:
    return np.arange(-cutoff, cutoff + 1)


def box_labels(d: int, cutoff: int, center: Optional[np.ndarray] = None) -> np.ndarray:
    """All integer labels with ||m - center||_inf <= cutoff, as rows."""
    axes = [label_range(cutoff)] * d
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    if center is not None:
        grid = grid + np.asarray(center, dtype=int)
    return grid


def dense_index(labels: np.ndarray, cutoff: int) -> Tuple[np.ndarray, ...]:
    """Index tuple into a centred dense array for integer labels."""
    labels = np.asarray(labels, dtype=int)
    return tuple(labels[..., i] + cutoff for i in range(labels.shape[-1]))


@dataclass(frozen=True, eq=False)
class FourierSeries:
    """Trigonometric series sum_m c_m exp(i <B* m, q>) on a lattice torus

    Coefficients are held as a dense centred array of shape (2K+1,)*d where
    K is the cutoff; ``coefficients`` exposes them as a mapping from label
    tuples to complex amplitudes.
    """

    lattice: Lattice
    dense: np.ndarray
    hermitian: bool = False
    label: str = field(default="")

    def __post_init__(self) -> None:
        dense = np.asarray(self.dense, dtype=complex)
        d = self.lattice.dimension
        if dense.ndim != d or any(n != dense.shape[0] for n in dense.shape) or dense.shape[0] % 2 != 1:
            raise PotentialFormatError(f"Dense coefficients must have shape (2K+1,)*{d}, got {dense.shape}")
        object.__setattr__(self, "dense", dense)
        if self.hermitian:
            mirrored = np.conj(dense[(slice(None, None, -1),) * d])
            scale = max(1.0, float(np.max(np.abs(dense))))
            defect = float(np.max(np.abs(dense - mirrored)))
            if defect > HERMITIAN_TOL * scale:
                raise PotentialFormatError(
                    f"Series flagged real is not Hermitian: max |c_-m - conj(c_m)| = {defect:.3e}"
                )

    @property
    def dimension(self) -> int:
        return self.lattice.dimension

    @property
    def cutoff(self) -> int:
        return (self.dense.shape[0] - 1) // 2

    @cached_property
    def labels(self) -> np.ndarray:
        return box_labels(self.dimension, self.cutoff)

    @cached_property
    def support(self) -> Tuple[np.ndarray, np.ndarray]:
        """Labels and coefficients of the nonzero modes."""
        flat = self.dense.reshape(-1)
        mask = np.abs(flat) > 0.0
        return self.labels[mask], flat[mask]

    @property
    def coefficients(self) -> Dict[Tuple[int, ...], complex]:
        labels, values = self.support
        return {tuple(int(x) for x in m): complex(c) for m, c in zip(labels, values)}

    def coefficient(self, m) -> complex:
        m = np.atleast_1d(np.asarray(m, dtype=int))
        if np.max(np.abs(m)) > self.cutoff:
            return 0.0j
        return complex(self.dense[dense_index(m, self.cutoff)])

    @classmethod
    def from_coefficients(
        cls,
        lattice: Lattice,
        coefficients: Dict[Tuple[int, ...], complex],
        hermitian: bool = False,
        cutoff: Optional[int] = None,
        label: str = "",
    ) -> "FourierSeries":
        d = lattice.dimension
        needed = max((max(abs(i) for i in key) for key in coefficients), default=0)
        K = needed if cutoff is None else cutoff
        dense = np.zeros((2 * K + 1,) * d, dtype=complex)
        for key, value in coefficients.items():
            key = tuple(int(i) for i in np.atleast_1d(key))
            if len(key) != d:
                raise PotentialFormatError(f"Label {key} does not match dimension {d}")
            if max(abs(i) for i in key) > K:
                continue
            dense[tuple(i + K for i in key)] += complex(value)
        return cls(lattice=lattice, dense=dense, hermitian=hermitian, label=label)

    @classmethod
    def zero(cls, lattice: Lattice, cutoff: int = 0, hermitian: bool = True) -> "FourierSeries":
        dense = np.zeros((2 * cutoff + 1,) * lattice.dimension, dtype=complex)
        return cls(lattice=lattice, dense=dense, hermitian=hermitian)

    def resized(self, cutoff: int) -> "FourierSeries":
        """Copy padded or truncated to a new cutoff."""
        return FourierSeries(
            lattice=self.lattice,
            dense=resize_dense(self.dense, cutoff),
            hermitian=self.hermitian,
            label=self.label,
        )

    def scaled(self, factor: float) -> "FourierSeries":
        return FourierSeries(
            lattice=self.lattice,
            dense=self.dense * factor,
            hermitian=self.hermitian and np.isreal(factor),
            label=self.label,
        )

    def on_grid(self, n: int) -> np.ndarray:
        """Values on the uniform standard grid phi_j = 2pi j / n."""
        values = dense_to_grid(self.dense, n)
        return values.real if self.hermitian else values

    def mean(self) -> complex:
        return self.coefficient(np.zeros(self.dimension, dtype=int))

    @cached_property
    def extrema(self) -> Tuple[float, float]:
        return potential_extrema(self)

    def digest(self) -> str:
        """Stable hash of lattice and coefficients for cache keys."""
        h = hashlib.sha256()
        h.update(self.lattice.digest().encode())
        h.update(np.ascontiguousarray(self.dense).tobytes())
        h.update(b"H" if self.hermitian else b"C")
        return h.hexdigest()

    def __iter__(self) -> Iterator[Tuple[Tuple[int, ...], complex]]:
        return iter(self.coefficients.items())


@dataclass(frozen=True, eq=False)
class PhasePoint:
    """Point (p, q) of T*T with q reduced modulo the lattice"""

    p: np.ndarray
    q: np.ndarray

    @classmethod
    def reduced(cls, p, q, lattice: Lattice) -> "PhasePoint":
        return cls(p=np.atleast_1d(np.asarray(p, dtype=float)),
                   q=lattice.reduce_position(np.atleast_1d(np.asarray(q, dtype=float))))


# Evaluation


def _as_points(q, d: int) -> Tuple[np.ndarray, bool]:
    q = np.asarray(q, dtype=float)
    single = q.ndim == 0 or (q.ndim == 1 and q.shape[0] == d)
    if q.ndim <= 1:
        return q.reshape(-1, d), single
    return q, False


def fourier_eval(series: FourierSeries, q) -> np.ndarray:
    """Evaluate sum c_m exp(i <B* m, q>) at one point or at rows of q."""
    points, single = _as_points(q, series.dimension)
    labels, coeffs = series.support
    if len(coeffs) == 0:
        values = np.zeros(len(points), dtype=complex)
    else:
        phase = (points @ series.lattice.dual_basis) @ labels.T
        values = np.exp(1j * phase) @ coeffs
    if series.hermitian:
        values = values.real
    return values[0] if single else values


def fourier_gradient(series: FourierSeries, q) -> np.ndarray:
    """Gradient sum i l* c_m exp(i <l*, q>) in cartesian components."""
    points, single = _as_points(q, series.dimension)
    labels, coeffs = series.support
    if len(coeffs) == 0:
        grads = np.zeros(points.shape, dtype=complex)
    else:
        duals = series.lattice.dual_vectors(labels)
        phase = points @ duals.T
        grads = (np.exp(1j * phase) * coeffs) @ (1j * duals)
    if series.hermitian:
        grads = grads.real
    return grads[0] if single else grads


def standard_eval(series: FourierSeries, phi) -> np.ndarray:
    """Evaluate at standard angles phi (rows), i.e. at q = L phi."""
    labels, coeffs = series.support
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    if len(coeffs) == 0:
        return np.zeros(len(phi), dtype=complex)
    values = np.exp(1j * (phi @ labels.T)) @ coeffs
    return values.real if series.hermitian else values


def standard_gradient(series: FourierSeries, phi) -> np.ndarray:
    """Gradient with respect to standard angles phi (rows)."""
    labels, coeffs = series.support
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    if len(coeffs) == 0:
        return np.zeros(phi.shape)
    grads = (np.exp(1j * (phi @ labels.T)) * coeffs) @ (1j * labels)
    return grads.real if series.hermitian else grads


def hamiltonian(potential: FourierSeries, p, q) -> np.ndarray:
    """H(p, q) = |p|^2 / 2 + V(q), vectorised over rows."""
    p = np.atleast_2d(np.asarray(p, dtype=float))
    return 0.5 * np.sum(p * p, axis=1) + np.atleast_1d(fourier_eval(potential, np.atleast_2d(q)))


def scaled_hamiltonian(potential: FourierSeries, J, phi, epsilon: float) -> np.ndarray:
    """H_eps(J, phi) = <J, M J> / 2 + eps V(L phi), vectorised over rows."""
    J = np.atleast_2d(np.asarray(J, dtype=float))
    M = potential.lattice.M
    kinetic = 0.5 * np.einsum("ni,ij,nj->n", J, M, J)
    return kinetic + epsilon * np.atleast_1d(standard_eval(potential, phi)).real


def ballistic_rescale(x: PhasePoint, E: float, lattice: Lattice) -> Tuple[np.ndarray, np.ndarray]:
    """M_E: (p, q) -> (L^T p / sqrt(E), L^{-1} q mod 2pi)"""
    if not E > 0:
        raise NonpositiveEnergy(f"Ballistic rescaling needs E > 0, got {E}")
    J = np.asarray(x.p, dtype=float) @ lattice.L / np.sqrt(E)
    phi = np.mod(np.asarray(x.q, dtype=float) @ lattice.L_inv.T, TWO_PI)
    return J, phi


def inverse_ballistic_rescale(J, phi, E: float, lattice: Lattice) -> PhasePoint:
    if not E > 0:
        raise NonpositiveEnergy(f"Ballistic rescaling needs E > 0, got {E}")
    p = np.sqrt(E) * (np.asarray(J, dtype=float) @ lattice.L_inv)
    q = np.asarray(phi, dtype=float) @ lattice.L.T
    return PhasePoint.reduced(p, q, lattice)


# Torus grids and FFT transfer (standard coordinates)


def torus_grid(d: int, n: int) -> np.ndarray:
    """Uniform grid phi_j = 2pi j / n per axis, as rows in C order."""
    axis = TWO_PI * np.arange(n) / n
    return np.stack(np.meshgrid(*([axis] * d), indexing="ij"), axis=-1).reshape(-1, d)


def grid_labels(d: int, n: int) -> np.ndarray:
    """FFT integer frequencies for an n^d grid, shaped (n,)*d + (d,)."""
    freqs = np.fft.fftfreq(n, 1.0 / n).round().astype(int)
    return np.stack(np.meshgrid(*([freqs] * d), indexing="ij"), axis=-1)


def resize_dense(dense: np.ndarray, cutoff: int) -> np.ndarray:
    d = dense.ndim
    K = (dense.shape[0] - 1) // 2
    out = np.zeros((2 * cutoff + 1,) * d, dtype=complex)
    k = min(K, cutoff)
    src = tuple(slice(K - k, K + k + 1) for _ in range(d))
    dst = tuple(slice(cutoff - k, cutoff + k + 1) for _ in range(d))
    out[dst] = dense[src]
    return out


def dense_to_grid(dense: np.ndarray, n: int) -> np.ndarray:
    """Sample a centred dense series on the n^d standard grid."""
    d = dense.ndim
    K = (dense.shape[0] - 1) // 2
    if 2 * K + 1 > n:
        raise ValueError(f"Grid of {n} points cannot hold cutoff {K}")
    spectrum = np.zeros((n,) * d, dtype=complex)
    idx = np.arange(-K, K + 1) % n
    spectrum[np.ix_(*([idx] * d))] = dense
    return np.fft.ifftn(spectrum) * n**d


def grid_to_dense(values: np.ndarray, cutoff: int) -> np.ndarray:
    """Centred coefficients |m|_inf <= cutoff of grid samples."""
    d = values.ndim
    n = values.shape[0]
    if 2 * cutoff + 1 > n:
        raise ValueError(f"Grid of {n} points cannot resolve cutoff {cutoff}")
    spectrum = np.fft.fftn(values) / n**d
    idx = np.arange(-cutoff, cutoff + 1) % n
    return spectrum[np.ix_(*([idx] * d))]


def spectral_gradient(values: np.ndarray) -> np.ndarray:
    """Standard-angle gradient of grid samples, shape (d,) + grid shape."""
    d = values.ndim
    n = values.shape[0]
    labels = grid_labels(d, n)
    spectrum = np.fft.fftn(values)
    nyquist = np.any(np.abs(labels) == n // 2, axis=-1) if n % 2 == 0 else np.zeros(labels.shape[:-1], bool)
    out = []
    for axis in range(d):
        factor = 1j * labels[..., axis]
        factor = np.where(nyquist, 0.0, factor)
        out.append(np.fft.ifftn(factor * spectrum))
    result = np.stack(out)
    return result.real if np.isrealobj(values) else result


def potential_extrema(series: FourierSeries, n: int = 0) -> Tuple[float, float]:
    """(V_min, V_max) by grid search followed by a local polish"""
    d = series.dimension
    labels, _ = series.support
    if not np.any(labels):
        value = float(np.real(series.mean()))
        return value, value
    if not n:
        n = max(64, 8 * series.cutoff) if d == 1 else max(48, 4 * series.cutoff)
    samples = np.real(series.on_grid(n))
    grid = torus_grid(d, n)

    def polish(sign: float, start: np.ndarray) -> float:
        result = minimize(
            lambda phi: sign * float(np.real(standard_eval(series, phi[None, :])[0])),
            start,
            jac=lambda phi: sign * np.real(standard_gradient(series, phi[None, :])[0]),
            method="BFGS",
            options={"gtol": 1e-13},
        )
        return sign * float(result.fun)

    flat = samples.reshape(-1)
    v_min = min(float(flat.min()), polish(1.0, grid[int(np.argmin(flat))]))
    v_max = max(float(flat.max()), polish(-1.0, grid[int(np.argmax(flat))]))
    logger.debug("Potential extrema", v_min=v_min, v_max=v_max, grid=n)
    return v_min, v_max


def periodic_mean(
    func: Callable[[np.ndarray], np.ndarray],
    rtol: float = 1e-14,
    n_start: int = 1024,
    n_max: int = 2**22,
) -> float:
    """Average of a smooth 2pi-periodic function of one angle

    Trapezoid rule with grid doubling; only the new midpoints are evaluated
    at each level. Stops once two levels agree to rtol.
    """
    n = n_start
    total = float(np.sum(func(TWO_PI * np.arange(n) / n)))
    mean = total / n
    while n < n_max:
        midpoints = TWO_PI * (np.arange(n) + 0.5) / n
        total += float(np.sum(func(midpoints)))
        n *= 2
        refined = total / n
        if abs(refined - mean) <= rtol * max(abs(refined), 1e-300):
            return refined
        mean = refined
    logger.warning("Periodic quadrature hit the grid limit", n=n, rtol=rtol)
    return mean
