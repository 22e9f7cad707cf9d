"""
CSV tables and the run manifest

Floats are written with '%.17g' so that identical runs produce byte-identical
files and values round-trip exactly.
"""

import csv
import json
from pathlib import Path
from typing import Any, Iterable, List, Sequence

import numpy as np
import structlog

from ..models import Manifest
from .json_renderer import to_jsonable

logger = structlog.get_logger(__name__)

FLOAT_FORMAT = "%.17g"


def format_cell(value: Any) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (float, np.floating)):
        return FLOAT_FORMAT % float(value)
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if value is None:
        return ""
    return str(value)


def write_table(path: Path, columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    """Write a header line and one CSV line per row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        count = 0
        for row in rows:
            writer.writerow([format_cell(v) for v in row])
            count += 1
    logger.debug("Table written", path=str(path), rows=count)
    return path


def read_table(path: Path) -> List[dict]:
    """Rows of a CSV written by write_table, values left as strings."""
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def write_manifest(path: Path, manifest: Manifest) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = to_jsonable(manifest.model_dump(mode="json"))
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")
    return path
