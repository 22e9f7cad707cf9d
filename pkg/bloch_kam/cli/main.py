"""
CLI front-end using Typer framework

One subcommand per pipeline stage:
- bands: Bloch band energies and group velocities over a Brillouin grid
- classical: energy-velocity measure of the classical flow on a shell
- kam: KAM-volume scans and invariant tori
- quasimode: WKB quasimodes matched with the fiber spectrum
- compare: quantum against classical measure on a test-function panel
- sweep: high-energy sweep of the panel discrepancy

Every invocation writes manifest.json into the output directory, including
failed ones.
"""

import logging
import os
import sys
import time
from pathlib import Path
from typing import Any, Dict, List, Optional

import structlog
import typer
from typing_extensions import Annotated

# Lazy imports to speed up --help

EXIT_DOMAIN_ERROR = 1
EXIT_CONFIG_ERROR = 2


def _configure_logging(debug: bool = False):
    """Configure structured logging lazily.

    Normal CLI output should stay clean; stage summaries are printed
    intentionally by renderers. Numerical diagnostics are only emitted with
    --debug.
    """
    logging.basicConfig(
        format="%(message)s",
        stream=sys.stderr,
        level=logging.DEBUG if debug else logging.CRITICAL,
        force=True,
    )
    structlog.configure(
        processors=[
            structlog.stdlib.filter_by_level,
            structlog.stdlib.add_logger_name,
            structlog.stdlib.add_log_level,
            structlog.stdlib.PositionalArgumentsFormatter(),
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.processors.StackInfoRenderer(),
            structlog.processors.format_exc_info,
            structlog.processors.UnicodeDecoder(),
            structlog.processors.JSONRenderer()
        ],
        context_class=dict,
        logger_factory=structlog.stdlib.LoggerFactory(),
        cache_logger_on_first_use=True,
    )


# Create the main Typer app
app = typer.Typer(
    name="bloch-kam",
    help="Semiclassical Bloch bands, KAM tori and quasimodes for periodic potentials",
    add_completion=False,
    rich_markup_mode="rich",
    context_settings={"help_option_names": ["-h", "--help"]},
)


# Options shared by every stage
ConfigOption = Annotated[Optional[str], typer.Option("--config", "-c", help="TOML run configuration")]
OutputDirOption = Annotated[Optional[str], typer.Option("--output-dir", help="Directory for tables and manifest")]
OutputOption = Annotated[str, typer.Option("--output", "-o", help="Output format (text, json)")]
PotentialOption = Annotated[
    Optional[str], typer.Option("--potential", "-p", help="Built-in (free, cosine, cosine2d) or potential file")
]
AmplitudeOption = Annotated[Optional[float], typer.Option("--amplitude", help="Potential amplitude")]
DimensionOption = Annotated[Optional[int], typer.Option("--dimension", "-d", help="Dimension of 2 pi Z^d")]
HbarOption = Annotated[Optional[List[float]], typer.Option("--hbar", help="Semiclassical parameter (repeatable)")]
EnergyOption = Annotated[Optional[float], typer.Option("--energy", "-E", help="Shell centre E")]
DeltaOption = Annotated[Optional[float], typer.Option("--delta", help="Shell half-width delta in (0, 1)")]
KGridOption = Annotated[Optional[int], typer.Option("--k-grid", help="Brillouin grid points per axis")]
SeedOption = Annotated[Optional[int], typer.Option("--seed", help="Random seed (stochastic stages)")]
WorkersOption = Annotated[Optional[int], typer.Option("--workers", "-j", help="Parallel workers")]
MethodOption = Annotated[Optional[str], typer.Option("--method", help="Classical side: monte_carlo or quadrature")]
SamplesOption = Annotated[Optional[int], typer.Option("--samples", help="Liouville samples")]


def _echo_command_error(message: str, output: str = "text", code: Optional[str] = None,
                        exit_code: int = EXIT_DOMAIN_ERROR) -> None:
    """Render command-level errors in the requested output format."""
    if output == "json":
        from ..renderers.json_renderer import JsonRenderer

        typer.echo(JsonRenderer(pretty=True).render_error(message, code=code, exit_code=exit_code))
    else:
        prefix = f"Error [{code}]" if code else "Error"
        typer.echo(f"{prefix}: {message}", err=True)


def _overrides(
    potential: Optional[str] = None,
    amplitude: Optional[float] = None,
    dimension: Optional[int] = None,
    hbar: Optional[List[float]] = None,
    energy: Optional[float] = None,
    delta: Optional[float] = None,
    k_grid: Optional[int] = None,
    seed: Optional[int] = None,
    workers: Optional[int] = None,
    output_dir: Optional[str] = None,
    **sections: Dict[str, Any],
) -> Dict[str, Any]:
    """Nested override dict from CLI flags; unset flags stay None and are skipped."""
    overrides: Dict[str, Any] = {
        "potential": {"source": potential, "amplitude": amplitude},
        "lattice": {"dimension": dimension},
        "shell": {"energy": energy, "delta": delta},
        "bands": {"hbar": list(hbar) if hbar else None, "k_grid": k_grid},
        "seed": seed,
        "workers": workers,
        "output_dir": output_dir,
    }
    for name, values in sections.items():
        overrides.setdefault(name, {}).update(values)
    return overrides


def _fallback_output_dir(output_dir: Optional[str]) -> str:
    from ..config import OUTPUT_DIR_ENV

    return output_dir or os.environ.get(OUTPUT_DIR_ENV) or "bloch-kam-output"


def _run_stage(stage_name: str, config_path: Optional[str], overrides: Dict[str, Any], output: str) -> None:
    """Load the configuration, run one stage and write the manifest

    Exit codes: 0 success, 1 domain error, 2 configuration error.
    """
    if output not in ('text', 'json'):
        typer.echo(f"Error: Invalid output format '{output}'. Valid options: text, json", err=True)
        raise typer.Exit(EXIT_CONFIG_ERROR)

    from .. import __version__
    from ..config import load_run_config
    from ..errors import BlochKamError, ConfigError
    from ..models import Manifest, RunStatus, Stage
    from ..renderers.json_renderer import JsonRenderer
    from ..renderers.tables import write_manifest
    from .commands import COMMANDS, library_versions

    logger = structlog.get_logger(__name__)
    stage = Stage(stage_name)
    start_time = time.time()
    manifest = Manifest(stage=str(stage))
    manifest.versions = library_versions()
    manifest.versions["bloch-kam"] = __version__
    output_dir = _fallback_output_dir(overrides.get("output_dir"))
    result = None

    try:
        config = load_run_config(config_path, overrides)
        output_dir = config.output_dir
        manifest.config = config.echo()
        config.require_seed(stage)
        command = COMMANDS[stage](config, colors_enabled=output == "text")
        result = command.execute()
        manifest.files = result.summary.files
        manifest.summary = result.summary.model_dump(mode="json")
        manifest.timings = result.timings
    except (ConfigError, typer.BadParameter) as e:
        code = e.code if isinstance(e, ConfigError) else "cli/ConfigError"
        manifest.status = RunStatus.CONFIG_ERROR
        manifest.exit_code = EXIT_CONFIG_ERROR
        manifest.error = {"code": code, "message": str(e)}
        logger.debug("Configuration rejected", stage=stage_name, error=str(e))
    except BlochKamError as e:
        manifest.status = RunStatus.DOMAIN_ERROR
        manifest.exit_code = EXIT_DOMAIN_ERROR
        manifest.error = {"code": e.code, "message": str(e)}
        logger.debug("Stage failed", stage=stage_name, error=e.code, message=str(e))
    except Exception as e:
        manifest.status = RunStatus.DOMAIN_ERROR
        manifest.exit_code = EXIT_DOMAIN_ERROR
        manifest.error = {"code": f"{stage_name}/{type(e).__name__}", "message": str(e)}
        logger.exception("Unexpected stage failure", stage=stage_name)

    manifest.duration = time.time() - start_time
    manifest_path = Path(output_dir) / "manifest.json"
    try:
        write_manifest(manifest_path, manifest)
    except OSError as e:
        logger.warning("Could not write manifest", path=str(manifest_path), error=str(e))

    if manifest.error is not None:
        _echo_command_error(manifest.error["message"], output, code=manifest.error["code"],
                            exit_code=manifest.exit_code)
        raise typer.Exit(manifest.exit_code)

    if output == "json":
        typer.echo(JsonRenderer(pretty=True).render_manifest(manifest))
    else:
        typer.echo(result.output)
    raise typer.Exit(result.exit_code)


def version_callback(value: bool):
    """Show version and exit"""
    if value:
        from bloch_kam import __version__

        typer.echo(f"bloch-kam v{__version__}")
        raise typer.Exit()


@app.callback()
def main(
    version: Annotated[Optional[bool], typer.Option("--version", callback=version_callback, help="Show version and exit")] = None,
    debug: Annotated[bool, typer.Option("--debug", help="Enable debug logging")] = False,
):
    """
    bloch-kam: semiclassical band structure of periodic Schrödinger operators

    [bold]Stages:[/bold]
    • [cyan]bands[/cyan]     - Bloch bands and group velocities
    • [cyan]classical[/cyan] - Classical energy-velocity measure
    • [cyan]kam[/cyan]       - KAM tori and KAM-volume scans
    • [cyan]quasimode[/cyan] - WKB quasimodes and spectral matching
    • [cyan]compare[/cyan]   - Quantum vs classical measure
    • [cyan]sweep[/cyan]     - High-energy discrepancy sweep

    [bold]Exit Codes:[/bold] 0=success | 1=domain error | 2=configuration error
    """
    _configure_logging(debug=debug)


@app.command()
def bands(
    config: ConfigOption = None,
    output_dir: OutputDirOption = None,
    output: OutputOption = "text",
    potential: PotentialOption = None,
    amplitude: AmplitudeOption = None,
    dimension: DimensionOption = None,
    hbar: HbarOption = None,
    energy: EnergyOption = None,
    delta: DeltaOption = None,
    k_grid: KGridOption = None,
    n_bands: Annotated[Optional[int], typer.Option("--n-bands", help="Bands per k-point")] = None,
    cutoff: Annotated[Optional[int], typer.Option("--cutoff", help="Plane-wave box half-width")] = None,
    workers: WorkersOption = None,
):
    """
    Bloch bands E_n(k) and group velocities over a Brillouin grid

    Writes bands.csv, and weyl.csv when two or more hbar values are given.

    [bold]Examples:[/bold]
      bloch-kam bands --potential cosine --hbar 0.1 --k-grid 64
      bloch-kam bands -p cosine --hbar 0.2 --hbar 0.1 --hbar 0.05 -E 2
    """
    overrides = _overrides(potential, amplitude, dimension, hbar, energy, delta, k_grid, None, workers, output_dir,
                           bands={"n_bands": n_bands, "cutoff": cutoff})
    _run_stage("bands", config, overrides, output)


@app.command()
def classical(
    config: ConfigOption = None,
    output_dir: OutputDirOption = None,
    output: OutputOption = "text",
    potential: PotentialOption = None,
    amplitude: AmplitudeOption = None,
    dimension: DimensionOption = None,
    energy: EnergyOption = None,
    delta: DeltaOption = None,
    method: MethodOption = None,
    samples: SamplesOption = None,
    T: Annotated[Optional[float], typer.Option("--time", help="Averaging window T")] = None,
    dt: Annotated[Optional[float], typer.Option("--dt", help="Integrator step")] = None,
    seed: SeedOption = None,
    workers: WorkersOption = None,
):
    """
    Classical energy-velocity measure on the shell [(1-delta)E, (1+delta)E]

    Writes measure.csv with one weighted atom per row.

    [bold]Examples:[/bold]
      bloch-kam classical -p cosine -E 2 --seed 7
      bloch-kam classical -p cosine -E 2 --method quadrature
    """
    overrides = _overrides(potential, amplitude, dimension, None, energy, delta, None, seed, workers, output_dir,
                           classical={"method": method, "n_samples": samples, "T": T, "dt": dt})
    _run_stage("classical", config, overrides, output)


@app.command()
def kam(
    config: ConfigOption = None,
    output_dir: OutputDirOption = None,
    output: OutputOption = "text",
    potential: PotentialOption = None,
    amplitude: AmplitudeOption = None,
    dimension: DimensionOption = None,
    energy: EnergyOption = None,
    delta: DeltaOption = None,
    energies: Annotated[Optional[List[float]], typer.Option("--energies", help="Scan energy (repeatable)")] = None,
    frequency: Annotated[Optional[List[float]], typer.Option("--frequency", help="Torus frequency component (repeatable)")] = None,
    grid_size: Annotated[Optional[int], typer.Option("--grid-size", help="Action cells per axis (d = 2)")] = None,
    workers: WorkersOption = None,
):
    """
    KAM-volume scans, invariant tori and the threshold energy

    Writes kam_volume.csv, tori.csv and tori_coefficients.csv. With several
    --energies the threshold energy E_th is reported.

    [bold]Examples:[/bold]
      bloch-kam kam -p cosine -E 2
      bloch-kam kam -p cosine2d --energies 4 --energies 16 --energies 64
    """
    overrides = _overrides(potential, amplitude, dimension, None, energy, delta, None, None, workers, output_dir,
                           kam={"energies": list(energies) if energies else None,
                                "frequency": list(frequency) if frequency else None, "grid_size": grid_size})
    _run_stage("kam", config, overrides, output)


@app.command()
def quasimode(
    config: ConfigOption = None,
    output_dir: OutputDirOption = None,
    output: OutputOption = "text",
    potential: PotentialOption = None,
    amplitude: AmplitudeOption = None,
    dimension: DimensionOption = None,
    hbar: HbarOption = None,
    energy: EnergyOption = None,
    delta: DeltaOption = None,
    order: Annotated[Optional[int], typer.Option("--order", "-N", help="Transport solves N")] = None,
    alpha: Annotated[Optional[float], typer.Option("--alpha", help="Admissibility exponent")] = None,
    label: Annotated[Optional[List[int]], typer.Option("--label", help="Bloch label component (repeatable)")] = None,
    k: Annotated[Optional[List[float]], typer.Option("--k", help="Quasi-momentum component (repeatable)")] = None,
    workers: WorkersOption = None,
):
    """
    WKB quasimodes on admissible labels, matched against the fiber spectrum

    Writes quasimodes.csv with energy, residual, matched band and velocities.

    [bold]Examples:[/bold]
      bloch-kam quasimode -p cosine -E 2 --hbar 0.1 --hbar 0.05
      bloch-kam quasimode -p cosine -E 2 --hbar 0.05 --label 40 --k 0.3
    """
    overrides = _overrides(potential, amplitude, dimension, hbar, energy, delta, None, None, workers, output_dir,
                           quasimode={"order": order, "alpha": alpha, "label": list(label) if label else None},
                           bands={"k": list(k) if k else None})
    _run_stage("quasimode", config, overrides, output)


@app.command()
def compare(
    config: ConfigOption = None,
    output_dir: OutputDirOption = None,
    output: OutputOption = "text",
    potential: PotentialOption = None,
    amplitude: AmplitudeOption = None,
    dimension: DimensionOption = None,
    hbar: HbarOption = None,
    energy: EnergyOption = None,
    delta: DeltaOption = None,
    k_grid: KGridOption = None,
    method: MethodOption = None,
    samples: SamplesOption = None,
    seed: SeedOption = None,
    workers: WorkersOption = None,
):
    """
    Quantum measure against the classical one on a bump-function panel

    Writes comparison.csv (per panel function) and comparison_summary.csv.

    [bold]Examples:[/bold]
      bloch-kam compare -p free -E 1 --hbar 0.05 --method quadrature
      bloch-kam compare -p cosine2d -E 16 --hbar 0.1 --seed 3
    """
    overrides = _overrides(potential, amplitude, dimension, hbar, energy, delta, k_grid, seed, workers, output_dir,
                           classical={"method": method, "n_samples": samples})
    _run_stage("compare", config, overrides, output)


@app.command()
def sweep(
    config: ConfigOption = None,
    output_dir: OutputDirOption = None,
    output: OutputOption = "text",
    potential: PotentialOption = None,
    amplitude: AmplitudeOption = None,
    dimension: DimensionOption = None,
    hbar: HbarOption = None,
    energies: Annotated[Optional[List[float]], typer.Option("--energies", help="Sweep energy (repeatable, increasing)")] = None,
    delta: DeltaOption = None,
    k_grid: KGridOption = None,
    method: MethodOption = None,
    samples: SamplesOption = None,
    seed: SeedOption = None,
    workers: WorkersOption = None,
):
    """
    Panel discrepancy over increasing energies and decreasing hbar

    Writes sweep.csv ("E hbar discrepancy mass_q mass_c unconverged_fraction")
    and sweep_plot.csv (x = E, y = discrepancy).

    [bold]Examples:[/bold]
      bloch-kam sweep -p cosine --energies 4 --energies 16 --energies 64 --hbar 0.1 --hbar 0.05 --method quadrature
    """
    overrides = _overrides(potential, amplitude, dimension, hbar, None, delta, k_grid, seed, workers, output_dir,
                           classical={"method": method, "n_samples": samples},
                           compare={"energies": list(energies) if energies else None})
    _run_stage("sweep", config, overrides, output)


if __name__ == "__main__":
    app()
