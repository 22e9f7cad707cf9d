"""
Error taxonomy for bloch-kam

Every domain error carries the name of the pipeline module that raised it so the
CLI can report ``[module/ErrorName]`` and map it to an exit code.
"""

from typing import Optional


class BlochKamError(Exception):
    """Base exception for all domain errors"""

    module = "core"

    @property
    def code(self) -> str:
        """Return ``module/ErrorName`` for error reports."""
        return f"{self.module}/{type(self).__name__}"


# lattice-core

class LatticeError(BlochKamError):
    """Base exception for lattice and Fourier-series errors"""
    module = "lattice-core"


class SingularBasis(LatticeError):
    """Lattice basis is not invertible"""
    pass


class UnsupportedDimension(LatticeError):
    """Dimension outside the supported range {1, 2}"""
    pass


class NonpositiveEnergy(LatticeError):
    """Ballistic rescaling requested at E <= 0"""
    pass


class PotentialFormatError(LatticeError):
    """Potential file or coefficient table is malformed"""
    pass


# bloch-spectra

class SpectraError(BlochKamError):
    """Base exception for band-structure errors"""
    module = "bloch-spectra"


class CutoffTooSmall(SpectraError):
    """Plane-wave cutoff does not resolve the requested bands"""
    pass


class EigensolverFailure(SpectraError):
    """Dense Hermitian eigensolver did not converge"""
    pass


# classical-dynamics

class DynamicsError(BlochKamError):
    """Base exception for classical-flow errors"""
    module = "classical-dynamics"


class StepTooLarge(DynamicsError):
    """Energy drift exceeded the configured bound"""

    def __init__(self, message: str, drift: float = 0.0, dt: float = 0.0):
        super().__init__(message)
        self.drift = drift
        self.dt = dt


class EmptyShell(DynamicsError):
    """Rejection sampling never hit the energy shell"""
    pass


# kam-solver

class KamError(BlochKamError):
    """Base exception for torus construction errors"""
    module = "kam-solver"


class SmallDivisorBreakdown(KamError):
    """A retained Fourier mode has a divisor below half the Diophantine bound"""

    def __init__(self, message: str, mode: Optional[tuple] = None, divisor: float = 0.0):
        super().__init__(message)
        self.mode = mode
        self.divisor = divisor


class NoConvergence(KamError):
    """Newton iteration stagnated before reaching the tolerance"""

    def __init__(self, message: str, last_residual: float = float("nan")):
        super().__init__(message)
        self.last_residual = last_residual


class EnergyBelowSeparatrix(KamError):
    """No rotational torus exists at this energy in one dimension"""
    pass


# quasimodes

class QuasimodeError(BlochKamError):
    """Base exception for quasimode construction errors"""
    module = "quasimodes"


class DegenerateJacobian(QuasimodeError):
    """Mixed Hessian of the generating function is singular on the grid"""
    pass


class GridTooCoarse(QuasimodeError):
    """Synthesis quadrature failed the grid-doubling check"""
    pass


class WindowUnresolved(QuasimodeError):
    """Band spectrum does not resolve the matching window"""
    pass


# transport-compare

class CompareError(BlochKamError):
    """Base exception for measure comparison errors"""
    module = "transport-compare"


class EmptyOverlap(CompareError):
    """Panel supports contain no atoms of one of the measures"""
    pass


# cli

class ConfigError(BlochKamError):
    """Run configuration could not be read or validated"""
    module = "cli"
