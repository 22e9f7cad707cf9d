"""
On-disk cache for band sweeps

Entries are keyed by a hash of (potential digest, hbar, cutoff, k-grid, band
selection) and stored as .npz archives under ``<output_dir>/.cache``.
"""

import hashlib
import json
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import structlog

logger = structlog.get_logger(__name__)


class BandCache:
    """Directory of cached band tables"""

    def __init__(self, directory):
        self.directory = Path(directory)

    @staticmethod
    def key(potential_digest: str, hbar: float, cutoff: Optional[int], k_points: np.ndarray,
            selection: Dict[str, Any]) -> str:
        h = hashlib.sha256()
        h.update(potential_digest.encode())
        h.update(float(hbar).hex().encode())
        h.update(str(cutoff).encode())
        h.update(np.ascontiguousarray(k_points, dtype=float).tobytes())
        h.update(json.dumps(selection, sort_keys=True, default=str).encode())
        return h.hexdigest()[:24]

    def _path(self, key: str) -> Path:
        return self.directory / f"bands-{key}.npz"

    def load(self, key: str) -> Optional[Dict[str, np.ndarray]]:
        path = self._path(key)
        if not path.exists():
            return None
        try:
            with np.load(path, allow_pickle=False) as archive:
                arrays = {name: archive[name] for name in archive.files}
        except (OSError, ValueError) as e:
            logger.warning("Ignoring unreadable cache entry", path=str(path), error=str(e))
            return None
        logger.info("Band cache hit", key=key, path=str(path))
        return arrays

    def store(self, key: str, arrays: Dict[str, np.ndarray]) -> Path:
        self.directory.mkdir(parents=True, exist_ok=True)
        path = self._path(key)
        tmp = path.with_suffix(".tmp.npz")
        np.savez(tmp, **arrays)
        tmp.replace(path)
        logger.debug("Band cache stored", key=key, path=str(path))
        return path
