"""
WKB quasimodes on KAM tori

For the Bloch label m and quasi-momentum k the quasimode is

    psi(phi) = exp(i <m, phi>) exp(-i S_po(phi) / hbar) sum_j hbar^j A_j(phi)

on the torus with action P = hbar (m + kappa). Conjugating the fiber operator
by the phase leaves (K - E~) a + hbar T a - hbar^2 Delta_M a / 2, where

    T a = -i (<J, M grad a> + div(M J) a / 2),   J = P - grad S_po,

so the amplitudes solve T A_j = f_j + E_{j+1} A_0 order by order. In the
angle coordinate theta = phi + w(phi) the substitution A = A_0 g turns T into
-i A_0 (omega . grad_theta), which is inverted mode by mode.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import structlog

from ..errors import DegenerateJacobian, GridTooCoarse, SmallDivisorBreakdown
from ..kam.family import TorusFamily
from ..kam.solver import KamTorus
from ..lattice.core import (
    FourierSeries,
    Lattice,
    dense_to_grid,
    grid_labels,
    grid_to_dense,
    resize_dense,
    standard_eval,
    torus_grid,
)
from ..models import DiophantineParams
from ..spectra.bloch import BlochHamiltonian, resolving_cutoff

logger = structlog.get_logger(__name__)

JACOBIAN_FLOOR = 1e-6
SYNTHESIS_TOL = 1e-8
MIN_SYNTHESIS_GRID = {1: 256, 2: 64}
AMPLITUDE_GRID = {1: 512, 2: 32}


# Dense-coefficient calculus


def _labels_of(dense: np.ndarray) -> np.ndarray:
    K = (dense.shape[0] - 1) // 2
    axes = [np.arange(-K, K + 1)] * dense.ndim
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def _gradient_dense(dense: np.ndarray) -> List[np.ndarray]:
    labels = _labels_of(dense)
    return [1j * labels[..., b] * dense for b in range(dense.ndim)]


def _laplacian_dense(dense: np.ndarray, M: np.ndarray) -> np.ndarray:
    labels = _labels_of(dense)
    return -np.einsum("...i,ij,...j->...", labels, M, labels) * dense


def _on_grid(dense: np.ndarray, n: int) -> np.ndarray:
    K = (dense.shape[0] - 1) // 2
    if 2 * K + 1 > n:
        dense = resize_dense(dense, (n - 1) // 2)
    return dense_to_grid(dense, n)


def _series(lattice: Lattice, values: np.ndarray, hermitian: bool = False) -> FourierSeries:
    cutoff = values.shape[0] // 2 - 1
    dense = grid_to_dense(values, cutoff)
    if hermitian:
        mirrored = np.conj(dense[(slice(None, None, -1),) * dense.ndim])
        dense = 0.5 * (dense + mirrored)
    return FourierSeries(lattice=lattice, dense=dense, hermitian=hermitian)


def _amplitude_grid(torus: KamTorus, n: Optional[int]) -> int:
    return n or AMPLITUDE_GRID[torus.dimension]


@dataclass
class LeadingAmplitude:
    """A_0 = sqrt|det(I + grad w)| and the invariant density A_0^2 / <A_0^2>"""
    amplitude: FourierSeries
    density: FourierSeries
    min_jacobian: float
    n_grid: int


def leading_amplitude(torus: KamTorus, n_grid: Optional[int] = None) -> LeadingAmplitude:
    """Leading WKB amplitude of a torus and its normalised invariant measure

    Raises:
        DegenerateJacobian: min |det| of the angle-map Jacobian below 1e-6
    """
    n = _amplitude_grid(torus, n_grid)
    d = torus.dimension
    phi = torus_grid(d, n)
    det = np.linalg.det(torus.angle_map.inverse_jacobian(phi))
    smallest = float(np.min(np.abs(det)))
    if smallest < JACOBIAN_FLOOR:
        raise DegenerateJacobian(f"Angle-map Jacobian determinant reaches {smallest:.3e}")
    values = np.abs(det).reshape((n,) * d)
    amplitude = _series(torus.lattice, np.sqrt(values), hermitian=True)
    density = _series(torus.lattice, values / np.mean(values), hermitian=True)
    return LeadingAmplitude(amplitude=amplitude, density=density, min_jacobian=smallest, n_grid=n)


def apply_transport(torus: KamTorus, a: FourierSeries, n: int) -> np.ndarray:
    """Grid values of T a = -i (<J, M grad a> + div(M J) a / 2) on the n^d phi-grid"""
    d = torus.dimension
    M = torus.lattice.M
    S_dense = torus.generating.S_po.dense
    grad_S = np.stack([np.real(_on_grid(g, n)) for g in _gradient_dense(S_dense)], axis=-1)
    J = torus.action - grad_S
    MJ = J @ M.T
    div_MJ = -np.real(_on_grid(_laplacian_dense(S_dense, M), n))
    grad_a = np.stack([_on_grid(g, n) for g in _gradient_dense(a.dense)], axis=-1)
    a_grid = _on_grid(a.dense, n)
    return -1j * (np.sum(MJ * grad_a, axis=-1) + 0.5 * div_MJ * a_grid)


@dataclass
class TransportSolution:
    amplitude: FourierSeries
    energy: complex
    residual: float


def transport_solve(
    torus: KamTorus,
    A0: FourierSeries,
    f: FourierSeries,
    n_grid: Optional[int] = None,
    params: Optional[DiophantineParams] = None,
) -> TransportSolution:
    """Solve T A = f + E A_0 with the zero mode of A / A_0 set to 0

    E is minus the angle average of f / A_0; the rest is divided mode by mode
    by <omega, m> in the angle coordinate.

    Raises:
        SmallDivisorBreakdown: a divisor below half the Diophantine bound
    """
    n = _amplitude_grid(torus, n_grid)
    d = torus.dimension
    shape = (n,) * d
    theta = torus_grid(d, n)
    phi = torus.angle_map.to_configuration(theta)
    h = (standard_eval(f, phi) / np.real(standard_eval(A0, phi))).reshape(shape)
    h_hat = np.fft.fftn(h) / n**d
    energy = complex(-h_hat[(0,) * d])

    labels = grid_labels(d, n)
    divisor = labels @ torus.frequency
    norms = np.linalg.norm(labels, axis=-1)
    nyquist = np.any(np.abs(labels) == n // 2, axis=-1) if n % 2 == 0 else np.zeros(shape, bool)
    active = (norms > 0) & ~nyquist
    floor = np.full(shape, 1e-14 * max(1.0, float(np.max(np.abs(torus.frequency)))))
    if params is not None:
        floor = np.maximum(floor, 0.5 * params.gamma * np.where(active, norms, 1.0) ** (-params.tau))
    small = active & (np.abs(divisor) < floor)
    if np.any(small):
        index = np.unravel_index(np.argmax(small), shape)
        mode = tuple(int(v) for v in labels[index])
        raise SmallDivisorBreakdown(f"Transport divisor for mode {mode} is {abs(divisor[index]):.3e}",
                                    mode=mode, divisor=float(abs(divisor[index])))
    g_hat = np.where(active, h_hat / np.where(active, divisor, 1.0), 0.0)
    g = FourierSeries(lattice=torus.lattice, dense=_centred(g_hat, n), hermitian=False)

    grid = torus_grid(d, n)
    angles = torus.angle_map.to_angle(grid)
    a0 = np.real(standard_eval(A0, grid))
    values = (a0 * standard_eval(g, angles)).reshape(shape)
    amplitude = _series(torus.lattice, values)

    defect = apply_transport(torus, amplitude, n) - _on_grid(f.dense, n) - energy * _on_grid(A0.dense, n)
    residual = float(np.max(np.abs(defect)))
    logger.debug("Transport solve", energy=energy, residual=residual, grid=n)
    return TransportSolution(amplitude=amplitude, energy=energy, residual=residual)


def _centred(spectrum: np.ndarray, n: int) -> np.ndarray:
    """FFT-ordered coefficients to a centred dense array of cutoff n//2 - 1."""
    d = spectrum.ndim
    cutoff = n // 2 - 1
    idx = np.arange(-cutoff, cutoff + 1) % n
    return spectrum[np.ix_(*([idx] * d))]


@dataclass
class Quasimode:
    """Quasimode with its plane-wave coefficients and certificates"""
    label: Tuple[int, ...]
    k: np.ndarray
    kappa: np.ndarray
    hbar: float
    order: int
    torus: KamTorus = field(repr=False)
    potential: FourierSeries = field(repr=False)
    amplitudes: List[FourierSeries] = field(repr=False)
    energies: List[float]
    energy: float
    modes: np.ndarray = field(repr=False)
    wavefunction: np.ndarray = field(repr=False)
    cutoff: int
    residual_norm: float
    transport_residuals: List[float] = field(default_factory=list)
    imaginary_energy: float = 0.0
    synthesis_grid: int = 0

    @property
    def action(self) -> np.ndarray:
        return self.torus.action

    @property
    def dimension(self) -> int:
        return len(self.label)

    def phase(self, phi) -> np.ndarray:
        """S(k, phi) = hbar <m, phi> - S_po(phi), in standard angles."""
        phi = np.atleast_2d(np.asarray(phi, dtype=float))
        return self.hbar * (phi @ np.asarray(self.label)) - np.real(standard_eval(self.torus.generating.S_po, phi))

    def hamiltonian(self) -> BlochHamiltonian:
        return BlochHamiltonian(potential=self.potential, hbar=self.hbar, k=self.k, cutoff=self.cutoff)


def _synthesis_grid(d: int, extent: int, amplitude_cutoff: int) -> int:
    need = max(MIN_SYNTHESIS_GRID[d], 4 * extent, 2 * amplitude_cutoff + 2)
    return int(2 ** np.ceil(np.log2(need)))


def _synthesize(
    torus: KamTorus,
    label: np.ndarray,
    hbar: float,
    amplitudes: Sequence[FourierSeries],
    modes: np.ndarray,
    n: int,
) -> np.ndarray:
    """Plane-wave coefficients of psi on the basis ``modes`` from an n^d grid."""
    d = torus.dimension
    S = np.real(_on_grid(torus.generating.S_po.dense, n))
    total = np.zeros((n,) * d, dtype=complex)
    for j, A in enumerate(amplitudes):
        total += hbar**j * _on_grid(A.dense, n)
    spectrum = np.fft.fftn(np.exp(-1j * S / hbar) * total) / n**d
    offsets = (modes - label) % n
    return spectrum[tuple(offsets[:, i] for i in range(d))]


def assemble_quasimode(
    family: TorusFamily,
    label: Sequence[int],
    k,
    hbar: float,
    order: int,
    cutoff: Optional[int] = None,
    n_grid: Optional[int] = None,
    params: Optional[DiophantineParams] = None,
) -> Quasimode:
    """Order-N quasimode for the Bloch label m at quasi-momentum k

    Args:
        family: Torus family supplying the torus at P = hbar (m + kappa)
        label: Integer label m of the dual-lattice vector
        k: Quasi-momentum (cartesian)
        hbar: Semiclassical parameter
        order: Number N of transport solves
        cutoff: Plane-wave box for the residual (default resolves E~)
        n_grid: Angle grid of the amplitude calculus

    Raises:
        GridTooCoarse: doubling the synthesis grid moved a coefficient by more than 1e-8
    """
    potential = family.potential
    lattice = potential.lattice
    d = lattice.dimension
    label = np.asarray(label, dtype=int).reshape(d)
    k = np.atleast_1d(np.asarray(k, dtype=float))
    kappa = np.atleast_1d(lattice.reduced_momentum(k))
    torus = family.torus_at(hbar * (label + kappa))
    M = lattice.M

    lead = leading_amplitude(torus, n_grid)
    amplitudes: List[FourierSeries] = [lead.amplitude]
    energies: List[complex] = [torus.energy, 0.0]
    residuals: List[float] = []
    for j in range(1, order + 1):
        source = 0.5 * _laplacian_dense(amplitudes[j - 1].dense, M)
        for l_index in range(1, j):
            source = source + energies[j + 1 - l_index] * resize_dense(amplitudes[l_index].dense, source.shape[0] // 2)
        f = FourierSeries(lattice=lattice, dense=source, hermitian=False)
        solution = transport_solve(torus, lead.amplitude, f, n_grid=lead.n_grid, params=params)
        amplitudes.append(solution.amplitude)
        energies.append(solution.energy)
        residuals.append(solution.residual)

    imaginary = float(max(abs(np.imag(e)) for e in energies))
    real_energies = [float(np.real(e)) for e in energies]
    energy = float(sum(hbar**j * e for j, e in enumerate(real_energies)))

    if cutoff is None:
        cutoff = resolving_cutoff(potential, hbar, energy)
    ham = BlochHamiltonian(potential=potential, hbar=hbar, k=k, cutoff=cutoff)
    modes = ham.modes
    extent = int(np.max(np.abs(modes - label)))
    n = _synthesis_grid(d, extent, lead.amplitude.cutoff)
    coefficients = _synthesize(torus, label, hbar, amplitudes, modes, n)
    refined = _synthesize(torus, label, hbar, amplitudes, modes, 2 * n)
    change = float(np.max(np.abs(refined - coefficients)))
    if change > SYNTHESIS_TOL:
        raise GridTooCoarse(f"Synthesis grid {n} changed coefficients by {change:.3e} on refinement")

    norm = float(np.linalg.norm(refined))
    wavefunction = refined / norm
    residual = float(np.linalg.norm(ham.apply(wavefunction) - energy * wavefunction))
    logger.debug("Quasimode assembled", label=label.tolist(), hbar=hbar, energy=energy, residual=residual,
                 imaginary=imaginary)
    return Quasimode(
        label=tuple(int(v) for v in label),
        k=k,
        kappa=kappa,
        hbar=hbar,
        order=order,
        torus=torus,
        potential=potential,
        amplitudes=amplitudes,
        energies=real_energies,
        energy=energy,
        modes=modes,
        wavefunction=wavefunction,
        cutoff=cutoff,
        residual_norm=residual,
        transport_residuals=residuals,
        imaginary_energy=imaginary,
        synthesis_grid=n,
    )
