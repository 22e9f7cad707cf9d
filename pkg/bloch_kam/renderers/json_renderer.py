"""
JSON renderer for machine-readable output

Prints the run manifest (config echo, versions, timings, files and the stage
summary) for scripting.

Usage:
    bloch-kam bands --output json | jq '.summary.metrics'
"""

import json
from typing import Any, Optional

import numpy as np

from ..models import Manifest, StageSummary


def to_jsonable(value: Any) -> Any:
    """numpy scalars and arrays become plain Python values."""
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    return value


class JsonRenderer:
    """JSON renderer for bloch-kam output"""

    def __init__(self, pretty: bool = True):
        """Initialize JSON renderer

        Args:
            pretty: If True, output pretty-printed JSON
        """
        self.pretty = pretty
        self.indent = 2 if pretty else None

    def render_manifest(self, manifest: Manifest) -> str:
        return json.dumps(to_jsonable(manifest.model_dump(mode="json")), indent=self.indent, default=str)

    def render_summary(self, summary: StageSummary) -> str:
        return json.dumps(to_jsonable(summary.model_dump(mode="json")), indent=self.indent, default=str)

    def render_error(self, error_msg: str, code: Optional[str] = None, exit_code: int = 1) -> str:
        """Render error as JSON"""
        output = {
            "type": "error",
            "error": error_msg,
            "code": code,
            "exit_code": exit_code,
        }
        return json.dumps(output, indent=self.indent, default=str)
