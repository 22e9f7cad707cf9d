"""
Command implementations for the pipeline stages

Each stage command resolves the potential from the run configuration, runs its
numerical kernel, writes CSV tables into the output directory and returns a
StageSummary for the renderers. Manifest writing and exit codes are handled by
the typer front-end.
"""

import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np
import structlog

from ..batch import BatchRunner
from ..cache import BandCache
from ..errors import BlochKamError, ConfigError, EnergyBelowSeparatrix
from ..fits.regression import fit_power_law
from ..lattice.core import TWO_PI, FourierSeries, make_lattice, standard_lattice
from ..models import RunConfig, Stage, StageSummary, SummaryTable
from ..parsers.potential import registry
from ..renderers.tables import write_table
from ..renderers.terminal import TerminalRenderer

logger = structlog.get_logger(__name__)

TRACKED_PACKAGES = ("bloch-kam", "numpy", "scipy", "POT", "statsmodels", "pydantic", "structlog", "typer", "rich")
DEFAULT_REDUCED_K = 0.3
WEYL_K_POINTS = 8
COEFFICIENT_FLOOR = 1e-15


def library_versions() -> Dict[str, str]:
    """Installed versions of the package and its numerical stack."""
    versions = {}
    for name in TRACKED_PACKAGES:
        try:
            versions[name] = version(name)
        except PackageNotFoundError:
            versions[name] = "not installed"
    return versions


def _axis_columns(prefix: str, d: int) -> List[str]:
    return [f"{prefix}_{i + 1}" for i in range(d)]


@dataclass
class CommandResult:
    """Result of command execution"""
    output: str
    exit_code: int = 0
    analysis_duration: float = 0.0
    summary: Optional[StageSummary] = None
    timings: Dict[str, float] = field(default_factory=dict)


class BaseCommand:
    """Base class for all stage commands"""

    stage: Stage

    def __init__(self, config: Optional[RunConfig] = None, colors_enabled: bool = True):
        self.config = config or RunConfig()
        self.output_dir = Path(self.config.output_dir)
        self.cache = BandCache(self.output_dir / ".cache")
        self.colors_enabled = colors_enabled
        self.files: List[str] = []
        self.notes: List[str] = []
        self.timings: Dict[str, float] = {}

    @contextmanager
    def _timed(self, name: str) -> Iterator[None]:
        start = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - start

    def _write(self, name: str, columns: Sequence[str], rows) -> Path:
        path = write_table(self.output_dir / name, columns, rows)
        self.files.append(str(path))
        return path

    def potential(self) -> FourierSeries:
        """Potential on the configured lattice

        Raises:
            PotentialFormatError: unknown name or malformed potential file
            SingularBasis: the configured basis is not invertible
        """
        lattice_cfg = self.config.lattice
        lattice = None
        if lattice_cfg.basis is not None:
            lattice = make_lattice(np.asarray(lattice_cfg.basis, dtype=float))
        elif lattice_cfg.dimension is not None:
            lattice = standard_lattice(lattice_cfg.dimension)
        cfg = self.config.potential
        potential = registry.resolve(cfg.source, amplitude=cfg.amplitude, lattice=lattice, cutoff=cfg.cutoff)
        logger.debug("Potential resolved", source=cfg.source, dimension=potential.dimension,
                     cutoff=potential.cutoff, digest=potential.digest()[:12])
        return potential

    def k_point(self, d: int, lattice) -> np.ndarray:
        """Configured quasi-momentum, or reduced coordinates 0.3 on every axis."""
        if self.config.bands.k is not None:
            k = np.asarray(self.config.bands.k, dtype=float)
            if k.shape != (d,):
                raise ConfigError(f"bands.k must have {d} components, got {len(k)}")
            return k
        return lattice.dual_basis @ np.full(d, DEFAULT_REDUCED_K)

    def run(self) -> StageSummary:
        raise NotImplementedError

    def execute(self) -> CommandResult:
        """Run the stage and render its summary

        Domain errors propagate to the caller, which maps them to exit codes.
        """
        start_time = time.time()
        self.files, self.notes, self.timings = [], [], {}
        with self._timed("total"):
            summary = self.run()
        summary.files = list(self.files)
        summary.notes = summary.notes + self.notes
        analysis_duration = time.time() - start_time
        renderer = TerminalRenderer(colors_enabled=self.colors_enabled)
        logger.info("Stage finished", stage=str(self.stage), duration=analysis_duration, files=len(self.files))
        return CommandResult(
            output=renderer.render_summary(summary),
            exit_code=0,
            analysis_duration=analysis_duration,
            summary=summary,
            timings=dict(self.timings),
        )


class BandsCommand(BaseCommand):
    """Band energies and group velocities over a Brillouin grid"""

    stage = Stage.BANDS

    def _band_cutoff(self, potential: FourierSeries, hbar: float, n_bands: int) -> int:
        from ..spectra.bloch import UNIT_BALL_VOLUME, resolving_cutoff

        d = potential.dimension
        radius = (n_bands / UNIT_BALL_VOLUME[d]) ** (1.0 / d) + 1.0
        lam = float(np.max(np.linalg.eigvalsh(potential.lattice.M)))
        _, v_max = potential.extrema
        return resolving_cutoff(potential, hbar, v_max + 0.5 * lam * (hbar * radius) ** 2)

    def run(self) -> StageSummary:
        from ..spectra.bloch import band_sweep, brillouin_grid, weyl_scaling_fit

        cfg = self.config.bands
        potential = self.potential()
        d = potential.dimension
        if cfg.k is not None:
            k_points = self.k_point(d, potential.lattice)[None, :]
        else:
            k_points = brillouin_grid(potential.lattice, cfg.k_grid, offset=cfg.k_offset)

        rows = []
        overview = []
        for hbar in cfg.hbar:
            cutoff = cfg.cutoff or self._band_cutoff(potential, hbar, cfg.n_bands)
            with self._timed(f"bands hbar={hbar:g}"):
                table = band_sweep(potential, hbar, k_points, cutoff=cutoff, n_bands=cfg.n_bands,
                                   strict=cfg.strict, workers=self.config.workers, cache=self.cache)
            for i, k in enumerate(table.k_points):
                for n in range(table.eigenvalues.shape[1]):
                    energy = table.eigenvalues[i, n]
                    if not np.isfinite(energy):
                        continue
                    rows.append([hbar, i, *k, n, energy, *table.velocities[i, n],
                                 bool(table.converged[i, n]), bool(table.degenerate[i, n])])
            valid = table.eigenvalues[table.valid]
            unconverged = int(np.sum(table.valid & ~table.converged))
            if unconverged:
                self.notes.append(f"hbar={hbar:g}: {unconverged} band value(s) flagged unconverged")
            overview.append([float(hbar), int(table.cutoff), len(k_points),
                             float(valid.min()) if valid.size else None,
                             float(valid.max()) if valid.size else None, unconverged, bool(table.cached)])

        columns = ["hbar", "k_index", *_axis_columns("k", d), "band", "energy", *_axis_columns("v", d),
                   "converged", "degenerate"]
        self._write("bands.csv", columns, rows)

        metrics = {"dimension": d, "k_points": len(k_points), "n_bands": cfg.n_bands, "hbar": list(cfg.hbar)}
        if len(cfg.hbar) >= 2:
            interval = self.config.shell.interval()
            with self._timed("weyl"):
                weyl = weyl_scaling_fit(potential, sorted(cfg.hbar), k_points[:WEYL_K_POINTS], interval)
            self._write("weyl.csv", ["hbar", "mean_count", "deviation", "volume"],
                        [[h, float(np.mean(c)), dev, weyl.volume]
                         for h, c, dev in zip(weyl.hbars, weyl.counts, weyl.deviations)])
            metrics["weyl_volume"] = weyl.volume
            metrics["weyl_slope"] = weyl.fit.slope
            if weyl.fit.skipped:
                self.notes.append(f"Weyl fit skipped: {weyl.fit.reason}")

        return StageSummary(
            stage=self.stage,
            title="Bloch bands",
            metrics=metrics,
            tables=[SummaryTable(
                title="Bands per hbar",
                columns=["hbar", "cutoff", "k-points", "lowest", "highest", "unconverged", "cached"],
                rows=overview,
            )],
        )


class ClassicalCommand(BaseCommand):
    """Energy-velocity measure of the classical flow on the shell"""

    stage = Stage.CLASSICAL

    def run(self) -> StageSummary:
        from ..spectra.bloch import phase_space_volume
        from ..transport.compare import classical_side

        cfg = self.config.classical
        potential = self.potential()
        d = potential.dimension
        interval = self.config.shell.interval()
        with self._timed("measure"):
            measure = classical_side(potential, interval, cfg.method, cfg.n_samples, cfg.T, cfg.dt,
                                     self.config.seed, tol=cfg.velocity_tol, n_energy_cells=cfg.n_energy_cells,
                                     workers=self.config.workers)
        self._write("measure.csv", ["weight", "energy", *_axis_columns("v", d)],
                    ([w, *point] for w, point in zip(measure.weights, measure.points)))

        speeds = np.linalg.norm(measure.velocities, axis=1)
        mass = measure.total_mass
        metrics = {
            "method": str(cfg.method.value),
            "interval": [float(interval[0]), float(interval[1])],
            "atoms": len(measure),
            "total_mass": mass,
            "shell_volume": phase_space_volume(potential, interval),
            "volume_stderr": float(measure.volume_stderr),
            "unconverged_fraction": float(measure.unconverged_fraction),
            "mean_speed": float(np.dot(measure.weights, speeds) / mass) if mass > 0 else 0.0,
        }
        if measure.unconverged_fraction > 0:
            self.notes.append(
                f"{measure.unconverged_fraction:.1%} of samples did not settle within tol={cfg.velocity_tol:g}; "
                "they are placed at velocity 0"
            )
        return StageSummary(stage=self.stage, title="Classical energy-velocity measure", metrics=metrics)


class KamCommand(BaseCommand):
    """KAM-volume scans, representative tori and the threshold energy"""

    stage = Stage.KAM

    def _tori(self, potential: FourierSeries, reports) -> list:
        from ..kam.solver import action_angle_d1, newton_torus

        cfg = self.config.kam
        tori = []
        if cfg.frequency is not None:
            energy = self.config.shell.energy
            with self._timed("frequency torus"):
                tori.append(newton_torus(potential, cfg.frequency, epsilon=1.0, n_grid=cfg.newton_grid,
                                         tol=cfg.tol, params=cfg.params(potential.dimension, energy),
                                         max_iterations=cfg.max_iterations))
        if potential.dimension == 1:
            for report in reports:
                try:
                    tori.append(action_angle_d1(potential, report.energy, sign=1))
                except EnergyBelowSeparatrix as e:
                    self.notes.append(f"E={report.energy:g}: {e}")
        else:
            for report in reports:
                tori.extend(report.tori)
        return tori

    def run(self) -> StageSummary:
        from ..kam.family import kam_volume_fraction, threshold_energy

        cfg = self.config.kam
        potential = self.potential()
        d = potential.dimension
        energies = list(cfg.energies) or [self.config.shell.energy]

        reports = []
        for energy in energies:
            interval = self.config.shell.interval(energy)
            with self._timed(f"scan E={energy:g}"):
                reports.append(kam_volume_fraction(
                    potential, interval, params=cfg.params(d, energy), grid_size=cfg.grid_size, tol=cfg.tol,
                    n_grid=cfg.newton_grid, c=cfg.c, max_iterations=cfg.max_iterations,
                    workers=self.config.workers,
                ))

        self._write(
            "kam_volume.csv",
            ["energy", "delta", "fraction", "n_cells", "n_success", "n_resonant", "n_failed", "shell_volume",
             "kam_volume", "gamma", "tau", "defect_times_sqrt_E"],
            ([r.energy, r.delta, r.fraction, r.n_cells, r.n_success, r.n_resonant, r.n_failed, r.shell_volume,
              r.kam_volume, r.gamma, r.tau, (1.0 - r.fraction) * np.sqrt(r.energy)] for r in reports),
        )

        tori = self._tori(potential, reports)
        self._write(
            "tori.csv",
            ["torus", "energy", *_axis_columns("action", d), *_axis_columns("omega", d),
             *_axis_columns("velocity", d), "residual", "margin", "iterations"],
            ([i, t.energy, *t.action, *t.frequency, *t.velocity, t.residual, t.diophantine_margin, t.iterations]
             for i, t in enumerate(tori)),
        )
        self._write(
            "tori_coefficients.csv",
            ["torus", *_axis_columns("m", d), "real", "imag"],
            ([i, *label, value.real, value.imag]
             for i, t in enumerate(tori)
             for label, value in t.generating.S_po
             if abs(value) > COEFFICIENT_FLOOR),
        )

        metrics = {"dimension": d, "energies": [float(E) for E in energies], "tori": len(tori)}
        if len(reports) > 1:
            metrics["threshold_energy"] = threshold_energy(reports)
        return StageSummary(
            stage=self.stage,
            title="KAM tori",
            metrics=metrics,
            tables=[SummaryTable(
                title="KAM volume per energy",
                columns=["E", "fraction", "cells", "accepted", "resonant", "failed", "(1-f) sqrt(E)"],
                rows=[[float(r.energy), float(r.fraction), r.n_cells, r.n_success, r.n_resonant, r.n_failed,
                       float((1.0 - r.fraction) * np.sqrt(r.energy))] for r in reports],
            )],
        )


class QuasimodeCommand(BaseCommand):
    """Quasimodes on admissible Bloch labels, matched with the fiber spectrum"""

    stage = Stage.QUASIMODE

    def run(self) -> StageSummary:
        from ..kam.family import TorusFamily
        from ..quasimodes.builder import assemble_quasimode
        from ..quasimodes.separation import (
            admissible_momenta,
            quasimode_velocity,
            residual_and_match,
            separation_classify,
            spectrum_for,
        )

        cfg = self.config.quasimode
        kam = self.config.kam
        potential = self.potential()
        d = potential.dimension
        energy = self.config.shell.energy
        interval = self.config.shell.interval()
        params = kam.params(d, energy)
        alpha = cfg.resolved_alpha(d, params.tau)
        exponent = cfg.window_exponent if cfg.window_exponent is not None else float(cfg.order)
        k = self.k_point(d, potential.lattice)

        with self._timed("torus family"):
            family = TorusFamily.build(potential, interval, params=params, grid_size=kam.grid_size, tol=kam.tol,
                                       n_grid=kam.newton_grid, c=kam.c, max_iterations=kam.max_iterations,
                                       workers=self.config.workers)
        if family.is_empty:
            self.notes.append("No KAM tori in the shell; no admissible labels")

        rows = []
        overview = []
        worst_residual: Dict[float, float] = {}
        admissible_counts: Dict[float, int] = {}
        runner = BatchRunner(max_concurrent=self.config.workers)
        for hbar in self.config.bands.hbar:
            if cfg.label is not None:
                labels = [tuple(int(v) for v in cfg.label)]
            else:
                labels = admissible_momenta(k, hbar, alpha, family).members
                admissible_counts[hbar] = len(labels)

            def build(label, hbar=hbar):
                return assemble_quasimode(family, label, k, hbar, cfg.order, n_grid=cfg.grid)

            with self._timed(f"assemble hbar={hbar:g}"):
                batch = runner.run(build, labels, capture_errors=True)
            for error in batch.errors:
                label = labels[int(error["index"])]
                self.notes.append(f"hbar={hbar:g} label={list(label)}: {error['error']}: {error['message']}")
                rows.append([hbar, *k, *label, cfg.order] + [None] * (9 + 2 * d) + ["failed", error["error"]])
            quasimodes = [qm for qm in batch.results if qm is not None]
            if not quasimodes:
                overview.append([float(hbar), len(labels), 0, None, None, None])
                continue

            window = hbar**exponent
            with self._timed(f"spectrum hbar={hbar:g}"):
                spectrum = spectrum_for(quasimodes, window)
                separation = separation_classify(quasimodes, spectrum, hbar, cfg.order)
            for qm in quasimodes:
                try:
                    match = residual_and_match(qm, spectrum, exponent)
                except BlochKamError as e:
                    self.notes.append(f"hbar={hbar:g} label={list(qm.label)}: {e.code}: {e}")
                    rows.append([hbar, *k, *qm.label, cfg.order, qm.energy, qm.residual_norm]
                                + [None] * (7 + 2 * d) + ["unmatched", e.code])
                    continue
                velocity = quasimode_velocity(qm, spectrum)
                rows.append([
                    hbar, *k, *qm.label, cfg.order, qm.energy, qm.residual_norm, match.nearest_index,
                    match.spectral_distance, match.overlap, match.aligned_distance, match.eigenvector_bound,
                    qm.label in separation.separated, qm.label in separation.simple,
                    *velocity.expectation, *velocity.classical, "ok", "",
                ])
            residuals = [qm.residual_norm for qm in quasimodes]
            worst_residual[hbar] = max(residuals)
            summary = separation.summary()
            overview.append([float(hbar), len(labels), len(quasimodes), summary["separated"], summary["simple"],
                             float(max(residuals))])
            if not separation.injective:
                self.notes.append(f"hbar={hbar:g}: matched eigenvalues are not distinct")
            if separation.bound_violations:
                self.notes.append(f"hbar={hbar:g}: eigenvector bound fails for {separation.bound_violations}")

        columns = ["hbar", *_axis_columns("k", d), *_axis_columns("label", d), "order", "energy", "residual",
                   "matched_n", "energy_error", "overlap", "aligned_distance", "eigenvector_bound", "separated",
                   "simple", *_axis_columns("velocity", d), *_axis_columns("classical_velocity", d), "status",
                   "error"]
        self._write("quasimodes.csv", columns, rows)

        metrics = {"dimension": d, "order": cfg.order, "alpha": alpha, "beta": cfg.beta(d, params.tau),
                   "window_exponent": exponent, "k": [float(v) for v in k]}
        if len(worst_residual) >= 2:
            fit = fit_power_law(list(worst_residual), list(worst_residual.values()))
            metrics["residual_slope"] = fit.slope

        tables = [SummaryTable(
            title="Quasimodes per hbar",
            columns=["hbar", "admissible", "assembled", "separated", "simple", "max residual"],
            rows=overview,
        )]
        if admissible_counts and not family.is_empty:
            count_rows = self._counting(family, admissible_counts, alpha, exponent)
            columns = ["hbar", "admissible", "scaled_count", "kam_volume", "deviation", "mean_simple",
                       "bracket_value", "bracket_lower", "bracket_upper", "inside", "relative", "near_degenerate"]
            self._write("counting.csv", columns, count_rows)
            if len(count_rows) >= 2:
                fit = fit_power_law([r[0] for r in count_rows], [r[4] for r in count_rows])
                metrics["count_slope"] = fit.slope
                if fit.skipped:
                    self.notes.append(f"Count fit skipped: {fit.reason}")
            tables.append(SummaryTable(title="Admissible counts", columns=columns[:5],
                                       rows=[[float(v) for v in r[:5]] for r in count_rows]))
        return StageSummary(stage=self.stage, title="WKB quasimodes", metrics=metrics, tables=tables)

    def _counting(self, family, admissible_counts: Dict[float, int], alpha: float, exponent: float) -> list:
        """(2 pi hbar)^d |admissible| against vol(K_I), plus the k-averaged bracket when a grid is set.

        The measured deviation of the admissible count serves as the slack of the bracket.
        """
        from ..quasimodes.separation import counting_bracket, near_degeneracy_fraction

        cfg = self.config.quasimode
        d = family.dimension
        rows = []
        for hbar, count in admissible_counts.items():
            scaled = (TWO_PI * hbar) ** d * count
            deviation = abs(scaled - family.kam_volume)
            row = [hbar, count, scaled, family.kam_volume, deviation] + [None] * 7
            if cfg.count_k_grid is not None:
                with self._timed(f"counting hbar={hbar:g}"):
                    mean_simple, groups = self._simple_counts(family, hbar, alpha, exponent)
                bracket = counting_bracket(family.kam_volume, family.complement_volume, hbar, deviation,
                                           mean_simple, d, shell_volume=family.report.shell_volume)
                row[5:] = [mean_simple, bracket.value, bracket.lower, bracket.upper, bool(bracket.inside),
                           bracket.relative, near_degeneracy_fraction(groups, hbar, cfg.order)]
                if not bracket.inside:
                    self.notes.append(f"hbar={hbar:g}: k-averaged simple count {bracket.value:.4g} outside "
                                      f"[{bracket.lower:.4g}, {bracket.upper:.4g}]")
            rows.append(row)
        return rows

    def _simple_counts(self, family, hbar: float, alpha: float, exponent: float):
        """Mean number of simple labels over the counting k-grid, and the quasimodes per k-point"""
        from ..quasimodes.separation import admissible_momenta, build_quasimodes, separation_classify, spectrum_for
        from ..spectra.bloch import brillouin_grid

        cfg = self.config.quasimode
        counts = []
        groups = []
        for k in brillouin_grid(family.potential.lattice, cfg.count_k_grid):
            admissible = admissible_momenta(k, hbar, alpha, family)
            if not len(admissible):
                counts.append(0)
                continue
            try:
                quasimodes = build_quasimodes(family, admissible, cfg.order, n_grid=cfg.grid,
                                              workers=self.config.workers)
                spectrum = spectrum_for(quasimodes, hbar**exponent)
                report = separation_classify(quasimodes, spectrum, hbar, cfg.order)
            except BlochKamError as e:
                self.notes.append(f"hbar={hbar:g} k={[round(float(v), 6) for v in k]}: {e.code}: {e}")
                continue
            counts.append(len(report.simple))
            groups.append(quasimodes)
        return (float(np.mean(counts)) if counts else 0.0), groups


class CompareCommand(BaseCommand):
    """Quantum against classical energy-velocity measure on a bump panel"""

    stage = Stage.COMPARE

    def run(self) -> StageSummary:
        from ..transport.compare import TestFunctionPanel, classical_side, quantum_measure, weak_star_distance

        classical_cfg = self.config.classical
        compare_cfg = self.config.compare
        potential = self.potential()
        d = potential.dimension
        energy = self.config.shell.energy
        interval = self.config.shell.interval()
        panel = TestFunctionPanel.default(d, smoothness=compare_cfg.smoothness, energy_scale=energy)

        with self._timed("classical"):
            classical = classical_side(potential, interval, classical_cfg.method, classical_cfg.n_samples,
                                       classical_cfg.T, classical_cfg.dt, self.config.seed,
                                       tol=classical_cfg.velocity_tol, n_energy_cells=classical_cfg.n_energy_cells,
                                       workers=self.config.workers)

        function_rows = []
        overview = []
        for hbar in self.config.bands.hbar:
            with self._timed(f"quantum hbar={hbar:g}"):
                quantum = quantum_measure(potential, hbar, interval, self.config.bands.k_grid,
                                          workers=self.config.workers, cache=self.cache)
            report = weak_star_distance(quantum, classical, panel, max_atoms=compare_cfg.wasserstein_max_atoms)
            for i, f in enumerate(panel.functions):
                function_rows.append([hbar, i, *f.center, report.integrals_a[i], report.integrals_b[i],
                                      report.discrepancies[i], report.error_bars[i]])
            within = report.within_error(floor=compare_cfg.error_floor)
            overview.append([float(hbar), float(report.discrepancy), report.wasserstein, float(report.mass_a),
                             float(report.mass_b), float(report.metadata["unconverged_fraction"]), within])

        self._write("comparison.csv",
                    ["hbar", "function", "center_energy", *_axis_columns("center_v", d), "integral_quantum",
                     "integral_classical", "discrepancy", "error_bar"],
                    function_rows)
        columns = ["hbar", "discrepancy", "wasserstein", "mass_q", "mass_c", "unconverged_fraction",
                   "within_error"]
        self._write("comparison_summary.csv", columns, overview)
        return StageSummary(
            stage=self.stage,
            title="Quantum vs classical measure",
            metrics={"energy": energy, "interval": [float(interval[0]), float(interval[1])],
                     "classical_method": str(classical_cfg.method.value), "panel_functions": len(panel),
                     "classical_atoms": len(classical)},
            tables=[SummaryTable(title="Panel discrepancy per hbar", columns=columns, rows=overview)],
        )


class SweepCommand(BaseCommand):
    """High-energy sweep of the panel discrepancy"""

    stage = Stage.SWEEP

    def run(self) -> StageSummary:
        from ..transport.compare import TestFunctionPanel, high_energy_sweep

        classical_cfg = self.config.classical
        compare_cfg = self.config.compare
        potential = self.potential()
        panel = TestFunctionPanel.default(potential.dimension, smoothness=compare_cfg.smoothness)

        with self._timed("sweep"):
            report = high_energy_sweep(
                potential, compare_cfg.energies, self.config.bands.hbar, panel, delta=self.config.shell.delta,
                k_grid=self.config.bands.k_grid, method=classical_cfg.method, n_samples=classical_cfg.n_samples,
                T=classical_cfg.T, dt=classical_cfg.dt, seed=self.config.seed, tol=classical_cfg.velocity_tol,
                n_energy_cells=classical_cfg.n_energy_cells, error_floor=compare_cfg.error_floor,
                max_atoms=compare_cfg.wasserstein_max_atoms, workers=self.config.workers, cache=self.cache,
            )

        self._write(
            "sweep.csv",
            ["E", "hbar", "discrepancy", "mass_q", "mass_c", "unconverged_fraction", "wasserstein", "status",
             "error"],
            ([c.energy, c.hbar, c.discrepancy, c.mass_q, c.mass_c, c.unconverged_fraction, c.wasserstein,
              c.status, c.error] for c in report.cells),
        )
        self._write("sweep_plot.csv", ["x", "y"], report.plot_data())

        for cell in report.failed:
            self.notes.append(f"E={cell.energy:g} hbar={cell.hbar:g}: {cell.error}")
        if report.fit.skipped:
            self.notes.append(f"Fit skipped: {report.fit.reason}")
        scaled = report.scaled_discrepancies()
        return StageSummary(
            stage=self.stage,
            title="High-energy sweep",
            metrics={
                "slope": report.fit.slope,
                "slope_stderr": report.fit.slope_stderr,
                "scaled_ratio": report.scaled_ratio,
                "at_floor": report.at_floor,
                "failed_cells": len(report.failed),
                "limsup": report.metadata["limsup"],
            },
            tables=[SummaryTable(
                title="Discrepancy per energy",
                columns=["E", "discrepancy", "discrepancy sqrt(E)", "hbar trend"],
                rows=[[float(E), float(v), float(scaled[E]), report.hbar_trend.get(E)]
                      for E, v in sorted(report.discrepancy_by_energy.items())],
            )],
        )


COMMANDS = {
    Stage.BANDS: BandsCommand,
    Stage.CLASSICAL: ClassicalCommand,
    Stage.KAM: KamCommand,
    Stage.QUASIMODE: QuasimodeCommand,
    Stage.COMPARE: CompareCommand,
    Stage.SWEEP: SweepCommand,
}
