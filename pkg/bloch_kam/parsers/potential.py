"""
Potential parsers and the built-in potential registry

Potentials reach the lab either as a named built-in or as a text file. Two
file layouts are understood, both starting with the same header:

    # comments start with '#'
    dimension 2
    basis 6.283185307179586 0 0 6.283185307179586   # row-major d x d, columns are l_j
    format coefficients                            # or: grid
    real true                                      # Hermitian-symmetry flag

``format coefficients`` is followed by lines ``m_1 .. m_d re im``; ``format
grid`` is followed by ``shape n_1 .. n_d`` and then one real sample per line
in C order on the uniform cell mesh. Parsers are deterministic and side-effect
free; the coefficient form is canonical and every other input is transformed
into it.
"""

from abc import ABC, abstractmethod
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import structlog

from ..errors import PotentialFormatError
from ..lattice.core import (
    FourierSeries,
    Lattice,
    grid_to_dense,
    make_lattice,
    standard_lattice,
)

logger = structlog.get_logger(__name__)

MAX_FILE_BYTES = 5 * 1024 * 1024
DEFAULT_CUTOFF = 32


class ParserError(PotentialFormatError):
    """Base exception for potential parser errors"""
    pass


def _strip(line: str) -> str:
    return line.split("#", 1)[0].strip()


class Parser(ABC):
    """Abstract base class for potential parsers

    Parsers must be deterministic and side-effect free. They convert the body
    of a potential file (after the shared header) into a FourierSeries.
    """

    name = "base"

    @abstractmethod
    def feed(self, lattice: Lattice, body: List[str], hermitian: bool, cutoff: int) -> FourierSeries:
        """Parse body lines into a FourierSeries

        Args:
            lattice: Lattice declared in the header
            body: Remaining non-empty lines
            hermitian: Whether the series must be real-valued
            cutoff: Maximum label norm retained

        Returns:
            Parsed FourierSeries

        Raises:
            ParserError: When parsing fails
        """
        pass

    def _floats(self, line: str, expected: Optional[int] = None) -> List[float]:
        try:
            values = [float(tok) for tok in line.split()]
        except ValueError as e:
            raise ParserError(f"Non-numeric entry in line '{line}'") from e
        if expected is not None and len(values) != expected:
            raise ParserError(f"Expected {expected} numbers in line '{line}', found {len(values)}")
        return values


class CoefficientTableParser(Parser):
    """Parser for ``m_1 .. m_d re im`` coefficient tables"""

    name = "coefficients"

    def feed(self, lattice: Lattice, body: List[str], hermitian: bool, cutoff: int) -> FourierSeries:
        d = lattice.dimension
        table: Dict[Tuple[int, ...], complex] = {}
        for line in body:
            values = self._floats(line, expected=d + 2)
            label_values = values[:d]
            if any(v != int(v) for v in label_values):
                raise ParserError(f"Dual-lattice labels must be integers in line '{line}'")
            key = tuple(int(v) for v in label_values)
            if key in table:
                raise ParserError(f"Duplicate coefficient for label {key}")
            table[key] = complex(values[d], values[d + 1])
        if not table:
            raise ParserError("Coefficient table is empty")
        needed = max(max(abs(i) for i in key) for key in table)
        if needed > cutoff:
            logger.info("Truncating potential coefficients", needed=needed, cutoff=cutoff)
        return FourierSeries.from_coefficients(
            lattice, table, hermitian=hermitian, cutoff=min(needed, cutoff), label="file"
        )


class GridSampleParser(Parser):
    """Parser for potentials sampled on a uniform cell mesh"""

    name = "grid"

    def feed(self, lattice: Lattice, body: List[str], hermitian: bool, cutoff: int) -> FourierSeries:
        d = lattice.dimension
        if not body or not body[0].startswith("shape"):
            raise ParserError("Grid potentials need a 'shape n_1 .. n_d' line")
        shape_tokens = body[0].split()[1:]
        if len(shape_tokens) != d:
            raise ParserError(f"Shape line must list {d} sizes")
        try:
            shape = tuple(int(tok) for tok in shape_tokens)
        except ValueError as e:
            raise ParserError("Grid shape must be integers") from e
        if len(set(shape)) != 1 or shape[0] < 4:
            raise ParserError(f"Grid must be square with at least 4 points per axis, got {shape}")
        samples = [self._floats(line, expected=1)[0] for line in body[1:]]
        if len(samples) != int(np.prod(shape)):
            raise ParserError(f"Expected {int(np.prod(shape))} samples, found {len(samples)}")
        return potential_from_grid(np.asarray(samples).reshape(shape), lattice, cutoff, hermitian=hermitian)


def potential_from_grid(
    samples: np.ndarray,
    lattice: Lattice,
    cutoff: int = DEFAULT_CUTOFF,
    hermitian: bool = True,
) -> FourierSeries:
    """Fourier coefficients of samples on the uniform n^d cell mesh"""
    samples = np.asarray(samples)
    n = samples.shape[0]
    K = min(cutoff, (n - 1) // 2)
    dense = grid_to_dense(samples.astype(complex), K)
    if hermitian:
        d = samples.ndim
        dense = 0.5 * (dense + np.conj(dense[(slice(None, None, -1),) * d]))
    return FourierSeries(lattice=lattice, dense=dense, hermitian=hermitian, label="grid")


class PotentialFileReader:
    """Reads the shared header and dispatches to the body parser"""

    def __init__(self):
        self._parsers: Dict[str, Parser] = {}
        self._register_defaults()

    def _register_defaults(self):
        """Register default parsers"""
        self._parsers.update({
            'coefficients': CoefficientTableParser(),
            'grid': GridSampleParser(),
        })

    def register(self, name: str, parser: Parser):
        """Register a custom parser"""
        self._parsers[name] = parser

    def parse_text(self, text: str, cutoff: int = DEFAULT_CUTOFF) -> FourierSeries:
        lines = [_strip(line) for line in text.splitlines()]
        lines = [line for line in lines if line]
        header: Dict[str, List[str]] = {}
        while lines and lines[0].split()[0] in ("dimension", "basis", "format", "real"):
            key, *rest = lines.pop(0).split()
            header[key] = rest
        for key in ("dimension", "basis", "format"):
            if key not in header:
                raise ParserError(f"Missing '{key}' header line")
        try:
            d = int(header["dimension"][0])
        except (ValueError, IndexError) as e:
            raise ParserError("Header 'dimension' must be an integer") from e
        basis_values = [float(tok) for tok in header["basis"]]
        if len(basis_values) != d * d:
            raise ParserError(f"Header 'basis' must hold {d * d} numbers, found {len(basis_values)}")
        lattice = make_lattice(np.asarray(basis_values).reshape(d, d))
        fmt = header["format"][0] if header["format"] else ""
        if fmt not in self._parsers:
            raise ParserError(f"Unknown potential format '{fmt}'")
        hermitian = (header.get("real", ["true"])[0].lower() in ("true", "1", "yes"))
        series = self._parsers[fmt].feed(lattice, lines, hermitian, cutoff)
        logger.debug("Parsed potential", format=fmt, dimension=d, cutoff=series.cutoff)
        return series

    def parse_file(self, path, cutoff: int = DEFAULT_CUTOFF) -> FourierSeries:
        path = Path(path)
        try:
            size = path.stat().st_size
        except OSError as e:
            raise ParserError(f"Cannot read potential file {path}: {e}") from e
        if size > MAX_FILE_BYTES:
            raise ParserError(f"Potential file {path} exceeds {MAX_FILE_BYTES} bytes")
        return self.parse_text(path.read_text(encoding="utf-8"), cutoff=cutoff)


def parse_potential_file(path, cutoff: int = DEFAULT_CUTOFF) -> FourierSeries:
    return reader.parse_file(path, cutoff=cutoff)


def dump_potential_file(series: FourierSeries, path) -> Path:
    """Write a series in the canonical coefficient-table format"""
    lattice = series.lattice
    d = lattice.dimension
    lines = [
        "# bloch-kam potential",
        f"dimension {d}",
        "basis " + " ".join(format(float(x), ".17g") for x in lattice.basis.reshape(-1)),
        "format coefficients",
        f"real {'true' if series.hermitian else 'false'}",
    ]
    for key, value in sorted(series.coefficients.items()):
        labels = " ".join(str(i) for i in key)
        lines.append(f"{labels} {value.real:.17g} {value.imag:.17g}")
    path = Path(path)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


# Built-in potentials


def _free(lattice: Lattice, amplitude: float) -> Dict[Tuple[int, ...], complex]:
    return {(0,) * lattice.dimension: 0.0}


def _cosine(lattice: Lattice, amplitude: float) -> Dict[Tuple[int, ...], complex]:
    """a cos <l*_1, q> summed over the basis directions."""
    d = lattice.dimension
    table: Dict[Tuple[int, ...], complex] = {}
    for axis in range(d):
        unit = [0] * d
        unit[axis] = 1
        table[tuple(unit)] = 0.5 * amplitude
        table[tuple(-u for u in unit)] = 0.5 * amplitude
    return table


class PotentialRegistry:
    """Registry of named built-in potentials"""

    def __init__(self):
        self._builtins: Dict[str, Tuple[int, Callable[[Lattice, float], Dict]]] = {}
        self._register_defaults()

    def _register_defaults(self):
        """Register default potentials"""
        self._builtins.update({
            'free': (0, _free),
            'cosine': (1, _cosine),
            'cosine2d': (2, _cosine),
        })

    def register(self, name: str, builder: Callable[[Lattice, float], Dict], dimension: int = 0):
        """Register a custom built-in (dimension 0 means any)"""
        self._builtins[name] = (dimension, builder)

    def names(self) -> List[str]:
        return sorted(self._builtins)

    def is_builtin(self, name: str) -> bool:
        return name in self._builtins

    def create(
        self,
        name: str,
        amplitude: float = 1.0,
        lattice: Optional[Lattice] = None,
        cutoff: int = DEFAULT_CUTOFF,
    ) -> FourierSeries:
        """Create a built-in potential on the given (or standard) lattice"""
        if name not in self._builtins:
            raise ParserError(f"Unknown potential: {name}")
        dimension, builder = self._builtins[name]
        if lattice is None:
            lattice = standard_lattice(dimension or 1)
        if dimension and lattice.dimension != dimension:
            raise ParserError(f"Potential '{name}' needs dimension {dimension}, lattice has {lattice.dimension}")
        table = builder(lattice, amplitude)
        needed = max(max(abs(i) for i in key) for key in table)
        return FourierSeries.from_coefficients(
            lattice, table, hermitian=True, cutoff=min(needed, cutoff), label=name
        )

    def resolve(
        self,
        source: str,
        amplitude: float = 1.0,
        lattice: Optional[Lattice] = None,
        cutoff: int = DEFAULT_CUTOFF,
    ) -> FourierSeries:
        """Built-in name or path to a potential file"""
        if self.is_builtin(source):
            return self.create(source, amplitude=amplitude, lattice=lattice, cutoff=cutoff)
        series = parse_potential_file(source, cutoff=cutoff)
        if amplitude != 1.0:
            series = series.scaled(amplitude)
        return series


def builtin_potential(name: str, amplitude: float = 1.0, cutoff: int = DEFAULT_CUTOFF,
                      lattice: Optional[Lattice] = None) -> FourierSeries:
    return registry.create(name, amplitude=amplitude, lattice=lattice, cutoff=cutoff)


# Global instances
reader = PotentialFileReader()
registry = PotentialRegistry()
