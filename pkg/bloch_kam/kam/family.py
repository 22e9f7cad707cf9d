"""
Torus families over an energy shell and KAM-volume scans

A family answers two questions for the quasimode builder: how far an action
lies from the accepted KAM actions, and which torus carries a given action.
In one dimension every rotational torus above the separatrix is accepted and
built exactly; in two dimensions the accepted set is the union of action-grid
cells whose Newton construction succeeded in the rescaled problem.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog
from scipy.spatial import cKDTree

from ..batch import parallel_map
from ..errors import NoConvergence, SmallDivisorBreakdown
from ..lattice.core import TWO_PI, FourierSeries
from ..models import DiophantineParams, TargetKind
from ..spectra.bloch import phase_space_volume
from .solver import (
    KamTorus,
    _action_d1,
    diophantine_margin,
    newton_torus,
    separatrix_energy,
    torus_at_action_d1,
)

logger = structlog.get_logger(__name__)

CELL_PROBES = 4
KRONECKER = np.array([np.sqrt(2.0) - 1.0, np.sqrt(3.0) - 1.0])


class CellStatus(str, Enum):
    """Outcome of one torus attempt in a scan"""

    ACCEPTED = "accepted"
    RESONANT = "resonant"
    FAILED = "failed"

    def __str__(self) -> str:
        return self.value


@dataclass
class KamCell:
    """One action-grid cell of a scan, in rescaled coordinates"""
    action: np.ndarray
    status: str
    margin: float
    residual: Optional[float] = None
    error: str = ""
    torus: Optional[KamTorus] = field(default=None, repr=False)


@dataclass
class KamVolumeReport:
    """Outcome of a KAM-volume scan at one energy"""
    energy: float
    delta: float
    fraction: float
    n_cells: int
    n_success: int
    n_resonant: int
    n_failed: int
    shell_volume: float
    kam_volume: float
    gamma: float
    tau: float
    cell_width: np.ndarray
    cells: List[KamCell] = field(default_factory=list, repr=False)

    @property
    def epsilon(self) -> float:
        return 1.0 / self.energy

    @property
    def complement_volume(self) -> float:
        return max(self.shell_volume - self.kam_volume, 0.0)

    @property
    def accepted_actions(self) -> np.ndarray:
        """Accepted cell centres in unscaled standard actions (sqrt(E) J_hat)."""
        rows = [c.action for c in self.cells if c.status == CellStatus.ACCEPTED]
        d = len(self.cell_width)
        if not rows:
            return np.zeros((0, d))
        return np.sqrt(self.energy) * np.asarray(rows)

    @property
    def tori(self) -> List[KamTorus]:
        return [c.torus for c in self.cells if c.torus is not None]

    def summary(self) -> Dict[str, float]:
        return {
            "energy": self.energy,
            "fraction": self.fraction,
            "n_cells": self.n_cells,
            "n_success": self.n_success,
            "n_resonant": self.n_resonant,
            "n_failed": self.n_failed,
            "gamma": self.gamma,
            "defect_times_sqrt_E": (1.0 - self.fraction) * np.sqrt(self.energy),
        }


def _shell(interval: Tuple[float, float]) -> Tuple[float, float]:
    a, b = interval
    energy = 0.5 * (a + b)
    return energy, (b - a) / (a + b)


def _rotational_volume(potential: FourierSeries, low: float, high: float) -> float:
    """Phase-space volume of rotational orbits with energies in [low, high] (d = 1)."""
    if high <= low:
        return 0.0
    return 2.0 * TWO_PI * (_action_d1(potential, high) - _action_d1(potential, low))


def _scan_d1(potential: FourierSeries, interval: Tuple[float, float], params: DiophantineParams) -> KamVolumeReport:
    a, b = interval
    energy, delta = _shell(interval)
    sep = separatrix_energy(potential)
    shell_volume = phase_space_volume(potential, interval)
    kam_volume = _rotational_volume(potential, max(a, sep), b)
    if a > sep:
        fraction = 1.0
        kam_volume = shell_volume
    else:
        fraction = min(kam_volume / shell_volume, 1.0) if shell_volume > 0 else 0.0
    return KamVolumeReport(
        energy=energy, delta=delta, fraction=fraction, n_cells=0, n_success=0, n_resonant=0,
        n_failed=0, shell_volume=shell_volume, kam_volume=kam_volume, gamma=params.gamma,
        tau=params.tau, cell_width=np.zeros(1),
    )


def shell_cells(potential: FourierSeries, delta: float, grid_size: int) -> Tuple[np.ndarray, np.ndarray]:
    """Cell centres of a uniform grid over the rescaled shell's bounding box

    Keeps centres with <J, M J>/2 in [1 - delta, 1 + delta]; returns
    (centres, cell widths).
    """
    lattice = potential.lattice
    d = lattice.dimension
    half = np.sqrt(2.0 * (1.0 + delta) * np.diag(lattice.M_inv))
    width = 2.0 * half / grid_size
    axes = [-half[i] + width[i] * (np.arange(grid_size) + 0.5) for i in range(d)]
    centres = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    kinetic = 0.5 * np.einsum("ni,ij,nj->n", centres, lattice.M, centres)
    keep = (kinetic >= 1.0 - delta) & (kinetic <= 1.0 + delta)
    return centres[keep], width


def cell_probes(centre: np.ndarray, width: np.ndarray, n_probes: int = CELL_PROBES) -> np.ndarray:
    """Centre followed by Kronecker points inside the cell

    Uniform grid centres have rational frequency ratios on rectangular
    lattices, so each cell is also probed off-centre.
    """
    k = np.arange(1, n_probes + 1)[:, None]
    shifts = np.mod(k * KRONECKER[: len(centre)], 1.0) - 0.5
    return np.vstack([centre, centre + shifts * width])


def _attempt(
    potential: FourierSeries,
    action: np.ndarray,
    width: np.ndarray,
    epsilon: float,
    params: DiophantineParams,
    n_grid: int,
    tol: float,
    max_iterations: int,
) -> KamCell:
    best = 0.0
    omega = None
    for probe in cell_probes(action, width):
        candidate = potential.lattice.M @ probe
        margin = diophantine_margin(candidate, params) if np.any(candidate) else 0.0
        if margin >= params.gamma:
            omega = candidate
            break
        best = max(best, margin)
    if omega is None:
        return KamCell(action=action, status=CellStatus.RESONANT, margin=best)
    try:
        torus = newton_torus(potential, omega, epsilon=epsilon, n_grid=n_grid, tol=tol, params=params,
                             max_iterations=max_iterations)
    except (SmallDivisorBreakdown, NoConvergence) as e:
        logger.debug("Torus attempt failed", action=action.tolist(), error=e.code, message=str(e))
        return KamCell(action=action, status=CellStatus.FAILED, margin=margin, error=e.code)
    return KamCell(action=action, status=CellStatus.ACCEPTED, margin=margin, residual=torus.residual, torus=torus)


def kam_volume_fraction(
    potential: FourierSeries,
    interval: Tuple[float, float],
    params: Optional[DiophantineParams] = None,
    grid_size: int = 64,
    tol: float = 1e-8,
    n_grid: int = 32,
    c: float = 0.5,
    max_iterations: int = 50,
    workers: int = 1,
) -> KamVolumeReport:
    """Fraction of the shell's action grid carried by constructed KAM tori

    The scan runs in ballistic coordinates: eps = 1/E, shell <J, MJ>/2 in
    [1 - delta, 1 + delta], gamma = c sqrt(1/E) and tau = 2d + 1 unless
    params are given. Each cell is tested at the unperturbed frequency M J of
    its centre, or of the first Diophantine probe inside it.
    In one dimension the fraction is exact.
    """
    d = potential.dimension
    energy, delta = _shell(interval)
    params = params or DiophantineParams.for_energy(d, energy, c=c)
    params.check_dimension(d)
    if d == 1:
        report = _scan_d1(potential, interval, params)
        logger.info("KAM volume", energy=energy, fraction=report.fraction, exact=True)
        return report

    epsilon = 1.0 / energy
    centres, width = shell_cells(potential, delta, grid_size)
    cells = parallel_map(
        lambda J: _attempt(potential, J, width, epsilon, params, n_grid, tol, max_iterations),
        list(centres),
        workers=workers,
    )
    n_success = sum(c.status == CellStatus.ACCEPTED for c in cells)
    n_resonant = sum(c.status == CellStatus.RESONANT for c in cells)
    n_failed = len(cells) - n_success - n_resonant
    fraction = n_success / len(cells) if cells else 0.0
    shell_volume = phase_space_volume(potential, interval)
    logger.info("KAM volume", energy=energy, fraction=fraction, cells=len(cells), resonant=n_resonant,
                failed=n_failed)
    return KamVolumeReport(
        energy=energy,
        delta=delta,
        fraction=fraction,
        n_cells=len(cells),
        n_success=n_success,
        n_resonant=n_resonant,
        n_failed=n_failed,
        shell_volume=shell_volume,
        kam_volume=fraction * shell_volume,
        gamma=params.gamma,
        tau=params.tau,
        cell_width=width,
        cells=cells,
    )


def threshold_energy(reports: Sequence[KamVolumeReport], level: float = 0.5) -> Optional[float]:
    """Lowest scanned energy whose KAM fraction exceeds ``level``."""
    passing = [r.energy for r in reports if r.fraction > level]
    return min(passing) if passing else None


class TorusFamily:
    """Accepted KAM actions of a shell and on-demand torus construction

    Actions are unscaled standard-frame actions J = L^T p.
    """

    def __init__(
        self,
        potential: FourierSeries,
        interval: Tuple[float, float],
        report: KamVolumeReport,
        n_grid: int = 32,
        tol: float = 1e-8,
        max_iterations: int = 50,
    ):
        self.potential = potential
        self.interval = interval
        self.report = report
        self.n_grid = n_grid
        self.tol = tol
        self.max_iterations = max_iterations
        self._cache: Dict[Tuple[float, ...], KamTorus] = {}
        self._tree: Optional[cKDTree] = None
        self._bounds: Optional[Tuple[float, float]] = None

        if self.dimension == 1:
            a, b = interval
            sep = separatrix_energy(potential)
            if b > sep:
                self._bounds = (_action_d1(potential, max(a, sep)), _action_d1(potential, b))
        else:
            actions = report.accepted_actions
            if len(actions):
                self._tree = cKDTree(actions)
            self._half_width = 0.5 * np.sqrt(report.energy) * report.cell_width

    @classmethod
    def build(
        cls,
        potential: FourierSeries,
        interval: Tuple[float, float],
        params: Optional[DiophantineParams] = None,
        grid_size: int = 64,
        tol: float = 1e-8,
        n_grid: int = 32,
        c: float = 0.5,
        max_iterations: int = 50,
        workers: int = 1,
    ) -> "TorusFamily":
        report = kam_volume_fraction(potential, interval, params=params, grid_size=grid_size, tol=tol,
                                     n_grid=n_grid, c=c, max_iterations=max_iterations, workers=workers)
        return cls(potential, interval, report, n_grid=n_grid, tol=tol, max_iterations=max_iterations)

    @property
    def dimension(self) -> int:
        return self.potential.dimension

    @property
    def is_empty(self) -> bool:
        if self.dimension == 1:
            return self._bounds is None
        return self._tree is None

    @property
    def kam_volume(self) -> float:
        return self.report.kam_volume

    @property
    def complement_volume(self) -> float:
        return self.report.complement_volume

    @property
    def accepted_actions(self) -> np.ndarray:
        if self.dimension == 1:
            if self._bounds is None:
                return np.zeros((0, 1))
            low, high = self._bounds
            return np.array([[-high], [-low], [low], [high]])
        return self.report.accepted_actions

    def action_box(self) -> np.ndarray:
        """Half-widths of a box containing every shell action."""
        b = self.interval[1]
        v_min, _ = self.potential.extrema
        return np.sqrt(2.0 * max(b - v_min, 0.0) * np.diag(self.potential.lattice.M_inv))

    def distance(self, actions) -> np.ndarray:
        """Distance from each action row to the accepted set (0 inside)."""
        actions = np.atleast_2d(np.asarray(actions, dtype=float)).reshape(-1, self.dimension)
        if self.is_empty:
            return np.full(len(actions), np.inf)
        if self.dimension == 1:
            low, high = self._bounds
            x = np.abs(actions[:, 0])
            return np.maximum(np.maximum(low - x, x - high), 0.0)
        k = min(8, self._tree.n)
        _, index = self._tree.query(actions, k=k, p=np.inf)
        index = np.atleast_2d(index).reshape(len(actions), k)
        centres = self._tree.data[index]
        gaps = np.maximum(np.abs(actions[:, None, :] - centres) - self._half_width, 0.0)
        return np.min(np.linalg.norm(gaps, axis=-1), axis=1)

    def torus_at(self, action) -> KamTorus:
        """Torus with the given unscaled action (built on first request)

        Raises:
            KamError: the construction failed at this action
        """
        action = np.atleast_1d(np.asarray(action, dtype=float))
        key = tuple(np.round(action, 14))
        if key in self._cache:
            return self._cache[key]
        if self.dimension == 1:
            torus = torus_at_action_d1(self.potential, float(action[0]))
        else:
            torus = newton_torus(self.potential, action, epsilon=1.0, n_grid=self.n_grid, tol=self.tol,
                                 target_kind=TargetKind.ACTION, max_iterations=self.max_iterations)
        self._cache[key] = torus
        return torus

    def __repr__(self) -> str:
        return f"TorusFamily(d={self.dimension}, interval={self.interval}, accepted={len(self.accepted_actions)})"
