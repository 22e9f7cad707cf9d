"""Tests for bloch_kam/renderers/terminal.py, json_renderer.py and tables.py"""

import json

import numpy as np

from bloch_kam.models import Manifest, RunStatus, Stage, StageSummary, SummaryTable
from bloch_kam.renderers.json_renderer import JsonRenderer, to_jsonable
from bloch_kam.renderers.tables import format_cell, read_table, write_manifest, write_table
from bloch_kam.renderers.terminal import MAX_TABLE_ROWS, TerminalRenderer, format_value


def _summary(**kwargs):
    defaults = {
        "stage": Stage.BANDS,
        "title": "Band structure",
        "metrics": {"bands": 12, "hbar": 0.1},
    }
    defaults.update(kwargs)
    return StageSummary(**defaults)


class TestTerminalRenderer:
    """Tests for TerminalRenderer class"""

    def test_init_defaults(self):
        """Test TerminalRenderer initializes with defaults"""
        renderer = TerminalRenderer()
        assert renderer.colors_enabled is True
        assert renderer.console is not None

    def test_init_custom_width(self):
        """Test TerminalRenderer with custom width"""
        renderer = TerminalRenderer(width=80)
        assert renderer.console.size.width == 80

    def test_render_summary_basic(self):
        """Test the header and metrics are printed"""
        output = TerminalRenderer(colors_enabled=False).render_summary(_summary())
        assert "Band structure" in output
        assert "bands" in output
        assert "12" in output

    def test_render_summary_truncates_tables(self):
        """Test long tables point at the CSV output"""
        rows = [[i, float(i)] for i in range(MAX_TABLE_ROWS + 5)]
        summary = _summary(tables=[SummaryTable(title="Eigenvalues", columns=["n", "E"], rows=rows)])
        output = TerminalRenderer(colors_enabled=False, width=100).render_summary(summary)
        assert "Eigenvalues" in output
        assert "5 more rows" in output

    def test_render_summary_notes_and_files(self):
        """Test notes and written files are listed"""
        summary = _summary(notes=["3 bands unconverged"], files=["out/bands.csv"])
        output = TerminalRenderer(colors_enabled=False, width=100).render_summary(summary)
        assert "Notes (1)" in output
        assert "3 bands unconverged" in output
        assert "out/bands.csv" in output

    def test_markup_is_escaped(self):
        """Test rich markup in titles is shown literally"""
        output = TerminalRenderer(colors_enabled=False).render_summary(_summary(title="[red]x[/red]"))
        assert "[red]x[/red]" in output

    def test_render_error(self):
        """Test error rendering with details"""
        output = TerminalRenderer(colors_enabled=False).render_error("boom", details="more")
        assert "Error: boom" in output
        assert "more" in output


class TestFormatValue:
    """Tests for short metric formatting"""

    def test_values(self):
        """Test floats, booleans, NaN and lists"""
        assert format_value(True) == "yes"
        assert format_value(float("nan")) == "n/a"
        assert format_value(0.25) == "0.25"
        assert format_value(1.5e-7) == "1.500e-07"
        assert format_value([1, 0.5]) == "[1, 0.5]"
        assert format_value(None) == "-"


class TestJsonRenderer:
    """Tests for JsonRenderer class"""

    def test_render_manifest(self):
        """Test the manifest renders as JSON"""
        manifest = Manifest(stage="bands", files=["bands.csv"], summary={"bands": 3})
        data = json.loads(JsonRenderer().render_manifest(manifest))
        assert data["stage"] == "bands"
        assert data["status"] == "ok"
        assert data["files"] == ["bands.csv"]

    def test_render_summary(self):
        """Test a stage summary renders compactly"""
        text = JsonRenderer(pretty=False).render_summary(_summary())
        assert "\n" not in text
        assert json.loads(text)["metrics"]["bands"] == 12

    def test_render_error(self):
        """Test error payload fields"""
        data = json.loads(JsonRenderer().render_error("bad", code="cli/ConfigError", exit_code=2))
        assert data == {"type": "error", "error": "bad", "code": "cli/ConfigError", "exit_code": 2}

    def test_to_jsonable(self):
        """Test numpy values become plain Python"""
        value = to_jsonable({"a": np.arange(3), "b": np.float64(0.5), 1: (np.int64(2),)})
        assert value == {"a": [0, 1, 2], "b": 0.5, "1": [2]}
        assert type(value["b"]) is float


class TestTables:
    """Tests for CSV tables and manifests"""

    def test_format_cell(self):
        """Test full-precision floats and 0/1 booleans"""
        assert format_cell(0.1) == "0.10000000000000001"
        assert format_cell(np.bool_(True)) == "1"
        assert format_cell(np.int64(7)) == "7"
        assert format_cell(None) == ""

    def test_write_and_read(self, tmp_path):
        """Test a table is written with its header"""
        path = write_table(tmp_path / "sub" / "t.csv", ["k", "E"], [(0.5, 1.25), (-0.5, 2.0)])
        assert path.read_text().splitlines()[0] == "k,E"
        rows = read_table(path)
        assert rows[1] == {"k": "-0.5", "E": "2"}

    def test_write_manifest(self, tmp_path):
        """Test the manifest file is sorted JSON"""
        manifest = Manifest(stage="kam", status=RunStatus.DOMAIN_ERROR, exit_code=1,
                            error={"code": "kam-solver/NoConvergence", "message": "stalled"})
        path = write_manifest(tmp_path / "manifest.json", manifest)
        data = json.loads(path.read_text())
        assert data["exit_code"] == 1
        assert data["error"]["code"] == "kam-solver/NoConvergence"
        assert list(data) == sorted(data)
