"""
Core configuration and record models for bloch-kam

Run configuration is validated with pydantic so that every numeric parameter is
checked against its documented range before any stage starts. Numerical result
records that carry arrays live next to the code that produces them.
"""

from __future__ import annotations

from datetime import datetime, timezone
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .errors import ConfigError


class Stage(str, Enum):
    """Pipeline stages exposed as CLI subcommands"""

    BANDS = "bands"
    CLASSICAL = "classical"
    KAM = "kam"
    QUASIMODE = "quasimode"
    COMPARE = "compare"
    SWEEP = "sweep"

    def __str__(self) -> str:
        """Return the subcommand name when coerced to string."""
        return self.value

    @property
    def stochastic(self) -> bool:
        return self in (Stage.CLASSICAL, Stage.COMPARE, Stage.SWEEP)


class ClassicalMethod(str, Enum):
    """How the classical energy-velocity measure is built"""

    MONTE_CARLO = "monte_carlo"
    QUADRATURE = "quadrature"  # d = 1 only


class TargetKind(str, Enum):
    """What a Newton torus construction holds fixed"""

    FREQUENCY = "frequency"
    ACTION = "action"


class MeasureKind(str, Enum):
    """Origin of an empirical measure, which fixes its error model"""

    QUANTUM = "quantum"
    MONTE_CARLO = "monte_carlo"
    QUADRATURE = "quadrature"


class RunStatus(str, Enum):
    OK = "ok"
    DOMAIN_ERROR = "domain_error"
    CONFIG_ERROR = "config_error"


class DiophantineParams(BaseModel):
    """Parameters of the condition |<omega, k>| >= gamma ||k||^(-tau)"""

    gamma: float = Field(..., gt=0)
    tau: float = Field(..., gt=0)
    k_max: int = Field(default=32, ge=1)

    model_config = ConfigDict(frozen=True)

    def check_dimension(self, d: int) -> None:
        if not self.tau > d - 1:
            raise ConfigError(f"tau must exceed d - 1 = {d - 1}, got {self.tau}")

    @classmethod
    def for_energy(cls, d: int, energy: float, c: float = 0.5, tau: Optional[float] = None,
                   k_max: int = 32) -> "DiophantineParams":
        """gamma = c sqrt(1/E) and tau = 2d + 1 unless given."""
        return cls(gamma=c / energy**0.5, tau=tau if tau is not None else 2 * d + 1, k_max=k_max)


# Run configuration sections


class PotentialConfig(BaseModel):
    """Potential source: a built-in name ('free', 'cosine', 'cosine2d') or a file path"""

    source: str = Field(default="cosine", min_length=1)
    amplitude: float = Field(default=1.0)
    cutoff: int = Field(default=32, ge=0, le=256)


class LatticeConfig(BaseModel):
    """Lattice basis as row-major d x d rows; columns are the basis vectors"""

    basis: Optional[List[List[float]]] = None
    dimension: Optional[int] = Field(default=None, ge=1, le=2)

    @field_validator("basis")
    @classmethod
    def validate_square(cls, v: Optional[List[List[float]]]) -> Optional[List[List[float]]]:
        if v is not None and any(len(row) != len(v) for row in v):
            raise ValueError("lattice.basis must be a square matrix")
        return v

    @model_validator(mode="after")
    def validate_dimension(self) -> "LatticeConfig":
        if self.basis is not None and self.dimension is not None and len(self.basis) != self.dimension:
            raise ValueError(f"lattice.basis is {len(self.basis)} x {len(self.basis)} but dimension is {self.dimension}")
        return self


class ShellConfig(BaseModel):
    """Energy shell I = [(1 - delta) E, (1 + delta) E]"""

    energy: float = Field(default=2.0, gt=0)
    delta: float = Field(default=0.1)

    @field_validator("delta")
    @classmethod
    def validate_delta(cls, v: float) -> float:
        if not 0.0 < v < 1.0:
            raise ValueError(f"delta must lie in (0, 1), got {v}")
        return v

    def interval(self, energy: Optional[float] = None) -> Tuple[float, float]:
        E = self.energy if energy is None else energy
        return (1.0 - self.delta) * E, (1.0 + self.delta) * E


class BandsConfig(BaseModel):
    """Bloch-fiber discretisation"""

    hbar: List[float] = Field(default_factory=lambda: [0.1], min_length=1)
    k: Optional[List[float]] = None
    k_grid: int = Field(default=64, ge=1)
    k_offset: bool = True
    n_bands: int = Field(default=10, ge=1)
    cutoff: Optional[int] = Field(default=None, ge=1)
    strict: bool = True

    @field_validator("hbar")
    @classmethod
    def validate_hbar(cls, v: List[float]) -> List[float]:
        if any(h <= 0 for h in v):
            raise ValueError("every hbar must be > 0")
        return v


class ClassicalConfig(BaseModel):
    """Flow integration and Liouville sampling"""

    method: ClassicalMethod = ClassicalMethod.MONTE_CARLO
    n_samples: int = Field(default=2000, ge=1)
    T: float = Field(default=1e4, gt=0)
    dt: float = Field(default=1e-3, gt=0)
    velocity_tol: float = Field(default=1e-3, gt=0)
    n_energy_cells: int = Field(default=64, ge=1)

    @model_validator(mode="after")
    def validate_step(self) -> "ClassicalConfig":
        if self.dt > self.T:
            raise ValueError(f"classical.dt must not exceed classical.T ({self.dt} > {self.T})")
        return self


class KamConfig(BaseModel):
    """Torus construction and KAM-volume scans"""

    c: float = Field(default=0.5, gt=0)
    gamma: Optional[float] = Field(default=None, gt=0)
    tau: Optional[float] = Field(default=None, gt=0)
    k_max: int = Field(default=32, ge=1)
    grid_size: int = Field(default=64, ge=2)
    newton_grid: int = Field(default=32, ge=8)
    tol: float = Field(default=1e-8, gt=0)
    max_iterations: int = Field(default=50, ge=1)
    frequency: Optional[List[float]] = None
    energies: List[float] = Field(default_factory=list)

    def params(self, d: int, energy: float) -> DiophantineParams:
        """Diophantine parameters at energy E; gamma = c sqrt(1/E) unless pinned."""
        tau = self.tau if self.tau is not None else 2 * d + 1
        gamma = self.gamma if self.gamma is not None else self.c / energy**0.5
        params = DiophantineParams(gamma=gamma, tau=tau, k_max=self.k_max)
        params.check_dimension(d)
        return params


class QuasimodeConfig(BaseModel):
    """WKB quasimode construction"""

    order: int = Field(default=3, ge=0)
    alpha: Optional[float] = Field(default=None, gt=1)
    window_exponent: Optional[float] = Field(default=None, gt=0)
    grid: Optional[int] = Field(default=None, ge=16)
    label: Optional[List[int]] = None
    count_k_grid: Optional[int] = Field(default=None, ge=1)

    def resolved_alpha(self, d: int, tau: float) -> float:
        """alpha in (1, (tau - d) / d); defaults to the midpoint."""
        upper = (tau - d) / d
        if upper <= 1:
            raise ConfigError(f"tau = {tau} leaves no admissible alpha in (1, (tau - d)/d)")
        if self.alpha is None:
            return 0.5 * (1.0 + upper)
        if not 1.0 < self.alpha < upper:
            raise ConfigError(f"alpha must lie in (1, {upper:g}), got {self.alpha}")
        return self.alpha

    def beta(self, d: int, tau: float) -> float:
        """Exponent of the admissible-count correction, 1 - alpha d / (tau - d)."""
        return 1.0 - self.resolved_alpha(d, tau) * d / (tau - d)


class CompareConfig(BaseModel):
    """Measure comparison and high-energy sweep"""

    smoothness: int = Field(default=2, ge=0)
    energies: List[float] = Field(default_factory=lambda: [4.0, 16.0, 64.0], min_length=1)
    wasserstein_max_atoms: int = Field(default=2000, ge=2)
    error_floor: float = Field(default=1e-10, ge=0)

    @field_validator("energies")
    @classmethod
    def validate_increasing(cls, v: List[float]) -> List[float]:
        if any(e <= 0 for e in v) or any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("compare.energies must be positive and strictly increasing")
        return v


class RunConfig(BaseModel):
    """Validated configuration for one CLI run"""

    potential: PotentialConfig = Field(default_factory=PotentialConfig)
    lattice: LatticeConfig = Field(default_factory=LatticeConfig)
    shell: ShellConfig = Field(default_factory=ShellConfig)
    bands: BandsConfig = Field(default_factory=BandsConfig)
    classical: ClassicalConfig = Field(default_factory=ClassicalConfig)
    kam: KamConfig = Field(default_factory=KamConfig)
    quasimode: QuasimodeConfig = Field(default_factory=QuasimodeConfig)
    compare: CompareConfig = Field(default_factory=CompareConfig)

    seed: Optional[int] = Field(default=None, ge=0)
    workers: int = Field(default=1, ge=1)
    output_dir: str = Field(default="bloch-kam-output")

    def require_seed(self, stage: Stage) -> int:
        """Stochastic stages refuse to run without an explicit seed."""
        if self.seed is None:
            if stage.stochastic and self.classical.method is ClassicalMethod.MONTE_CARLO:
                raise ConfigError(f"seed is mandatory for the stochastic stage '{stage}'")
            return 0
        return self.seed

    def echo(self) -> Dict[str, Any]:
        return self.model_dump(mode="json")


class Manifest(BaseModel):
    """Run manifest written for every invocation, including failures"""

    stage: str
    status: RunStatus = RunStatus.OK
    exit_code: int = 0
    started_at: datetime = Field(default_factory=lambda: datetime.now(timezone.utc))
    duration: float = 0.0
    config: Dict[str, Any] = Field(default_factory=dict)
    versions: Dict[str, str] = Field(default_factory=dict)
    timings: Dict[str, float] = Field(default_factory=dict)
    files: List[str] = Field(default_factory=list)
    summary: Dict[str, Any] = Field(default_factory=dict)
    error: Optional[Dict[str, str]] = None


class SummaryTable(BaseModel):
    """Small table shown in the terminal summary of a stage"""

    title: str
    columns: List[str]
    rows: List[List[Any]] = Field(default_factory=list)


class StageSummary(BaseModel):
    """What a stage reports back to the terminal and JSON renderers"""

    stage: Stage
    title: str
    metrics: Dict[str, Any] = Field(default_factory=dict)
    tables: List[SummaryTable] = Field(default_factory=list)
    notes: List[str] = Field(default_factory=list)
    files: List[str] = Field(default_factory=list)
