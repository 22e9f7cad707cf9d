"""
Terminal renderer using rich for stage summaries

Each stage returns a StageSummary: headline metrics, a few small tables and
the list of emitted files. Full-precision numbers live in the CSV outputs; the
terminal shows them rounded.
"""

from typing import Any, List, Optional

from rich.console import Console
from rich.markup import escape
from rich.table import Table

from ..models import StageSummary, SummaryTable

MAX_TABLE_ROWS = 20


def format_value(value: Any) -> str:
    """Short human form of a metric value."""
    if isinstance(value, bool):
        return "yes" if value else "no"
    if isinstance(value, float):
        if value != value:
            return "n/a"
        if value == 0 or 1e-3 <= abs(value) < 1e5:
            return f"{value:.6g}"
        return f"{value:.3e}"
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(format_value(v) for v in value) + "]"
    if value is None:
        return "-"
    return str(value)


class TerminalRenderer:
    """ANSI terminal renderer using rich library

    - No external color themes
    - Honours environment width; wraps lines at 100 chars
    - Tables are truncated to their first rows with a count of the rest
    """

    def __init__(self, colors_enabled: bool = True, width: Optional[int] = None):
        self.console = Console(
            color_system="auto" if colors_enabled else None,
            width=width or min(100, Console().size.width),
            legacy_windows=False,
        )
        self.colors_enabled = colors_enabled

    def _display_text(self, value: object) -> str:
        """Return text safe to interpolate in Rich markup strings."""
        return escape(str(value))

    def render_summary(self, summary: StageSummary) -> str:
        """Render a stage summary

        Output sections:
        1. Header with the stage name
        2. Headline metrics
        3. Result tables
        4. Notes and written files
        """
        console = Console(file=None, width=self.console.size.width)

        with console.capture() as capture:
            console.print(f"\n[bold]{self._display_text(summary.title)}[/bold] ({summary.stage})")

            if summary.metrics:
                table = Table(show_header=False, box=None)
                table.add_column("Metric", style="cyan")
                table.add_column("Value", style="white", overflow="fold")
                for key, value in summary.metrics.items():
                    table.add_row(self._display_text(key), self._display_text(format_value(value)))
                console.print(table)

            for result_table in summary.tables:
                self._render_table(console, result_table)

            self._render_notes(console, summary.notes)

            if summary.files:
                console.print(f"\n[green]Wrote {len(summary.files)} file(s):[/green]")
                for path in summary.files:
                    console.print(f"  {self._display_text(path)}")

        return capture.get()

    def _render_table(self, console: Console, result_table: SummaryTable) -> None:
        console.print(f"\n{self._display_text(result_table.title)}")
        table = Table(show_header=True, header_style="bold magenta", box=None)
        for column in result_table.columns:
            table.add_column(self._display_text(column), overflow="fold")
        for row in result_table.rows[:MAX_TABLE_ROWS]:
            table.add_row(*(self._display_text(format_value(v)) for v in row))
        console.print(table)
        remaining = len(result_table.rows) - MAX_TABLE_ROWS
        if remaining > 0:
            console.print(f"  [dim]... {remaining} more rows in the CSV output[/dim]")

    def _render_notes(self, console: Console, notes: List[str]) -> None:
        if not notes:
            return
        console.print(f"\n[yellow]Notes ({len(notes)})[/yellow]")
        for note in notes:
            console.print(f"  [dim]• {self._display_text(note)}[/dim]")

    def render_error(self, error_msg: str, details: Optional[str] = None) -> str:
        """Render error message"""
        console = Console(file=None, width=self.console.size.width)
        with console.capture() as capture:
            console.print(f"[red]Error: {self._display_text(error_msg)}[/red]")
            if details:
                console.print(f"[dim]{self._display_text(details)}[/dim]")
        return capture.get()
