"""CLI front-end module for bloch-kam

Typer-based interface with one subcommand per pipeline stage:
bands, classical, kam, quasimode, compare and sweep.
"""

from .main import app

__all__ = ['app']
