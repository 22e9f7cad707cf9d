"""Tests for bloch_kam/spectra/bloch.py"""

from unittest.mock import patch

import numpy as np
import pytest

from bloch_kam.cache import BandCache
from bloch_kam.errors import CutoffTooSmall
from bloch_kam.lattice.core import TWO_PI, FourierSeries
from bloch_kam.parsers.potential import registry
from bloch_kam.spectra.bloch import (
    BlochHamiltonian,
    band_sweep,
    brillouin_grid,
    phase_space_volume,
    resolving_cutoff,
    shell_volume_constant,
    solve_bands,
    weyl_count,
    weyl_scaling_fit,
)


class TestSolveBands:
    """Tests for single-fiber diagonalisation"""

    def test_free_particle(self, free_1d):
        """Test E_n = (m + k)^2 / 2 and v_n = m + k at hbar = 1"""
        spec = solve_bands(free_1d, 1.0, [0.3], cutoff=5, n_bands=3)
        assert np.allclose(spec.eigenvalues, [0.045, 0.245, 0.845])
        assert np.allclose(spec.group_velocities[:, 0], [0.3, -0.7, 1.3])
        assert spec.converged.all()
        assert not spec.degenerate.any()

    def test_free_particle_scaling(self, free_1d):
        """Test eigenvalues scale as hbar^2 and velocities as hbar"""
        spec = solve_bands(free_1d, 0.5, [0.3], cutoff=5, n_bands=2)
        assert np.allclose(spec.eigenvalues, [0.25 * 0.045, 0.25 * 0.245])
        assert np.allclose(spec.group_velocities[:, 0], [0.15, -0.35])

    def test_degenerate_bands_have_zero_velocity(self, free_1d):
        """Test the crossing at k = 0 is flagged and its velocity zeroed"""
        spec = solve_bands(free_1d, 1.0, [0.0], cutoff=5, n_bands=3)
        assert list(spec.degenerate) == [False, True, True]
        assert np.allclose(spec.group_velocity(1), 0.0)
        assert spec.next_eigenvalue == pytest.approx(2.0)

    def test_mathieu_characteristic_values(self, cosine_1d):
        """Test V = cos q against Mathieu values a = 8E, q = 4 at k = 0 and the zone edge"""
        from scipy.special import mathieu_a, mathieu_b

        periodic = solve_bands(cosine_1d, 1.0, [0.0], cutoff=20, n_bands=5)
        expected = np.sort([mathieu_a(0, 4.0), mathieu_b(2, 4.0), mathieu_a(2, 4.0),
                            mathieu_b(4, 4.0), mathieu_a(4, 4.0)]) / 8.0
        assert np.allclose(periodic.eigenvalues, expected, rtol=1e-6)

        edge = solve_bands(cosine_1d, 1.0, [0.5], cutoff=20, n_bands=4)
        expected = np.sort([mathieu_a(1, 4.0), mathieu_b(1, 4.0), mathieu_a(3, 4.0), mathieu_b(3, 4.0)]) / 8.0
        assert np.allclose(edge.eigenvalues, expected, rtol=1e-6)

    def test_dual_lattice_periodicity(self, cosine_1d):
        """Test E_n(k + l*) = E_n(k)"""
        a = solve_bands(cosine_1d, 0.5, [0.3], cutoff=20, n_bands=4)
        b = solve_bands(cosine_1d, 0.5, [1.3], cutoff=20, n_bands=4)
        assert np.allclose(a.eigenvalues, b.eigenvalues)

    def test_time_reversal(self, two_mode_1d):
        """Test E_n(-k) = E_n(k) for a real potential without reflection symmetry"""
        a = solve_bands(two_mode_1d, 0.4, [0.21], cutoff=24, n_bands=4)
        b = solve_bands(two_mode_1d, 0.4, [-0.21], cutoff=24, n_bands=4)
        assert np.allclose(a.eigenvalues, b.eigenvalues)
        assert np.allclose(a.group_velocities, -b.group_velocities, atol=1e-8)

    def test_velocity_matches_finite_difference(self, cosine_1d):
        """Test the expectation of D + hbar k against a central difference of E_0"""
        hbar, k, h = 0.5, 0.2, 1e-5
        spec = solve_bands(cosine_1d, hbar, [k], cutoff=20, n_bands=3)
        plus = solve_bands(cosine_1d, hbar, [k + h], cutoff=20, n_bands=3).eigenvalues[0]
        minus = solve_bands(cosine_1d, hbar, [k - h], cutoff=20, n_bands=3).eigenvalues[0]
        assert spec.group_velocity(0)[0] == pytest.approx((plus - minus) / (2 * h) / hbar, rel=1e-5)

    def test_oblique_velocity_matches_finite_difference(self, oblique_lattice):
        """Test cartesian velocities on a sheared lattice"""
        potential = registry.create("cosine2d", amplitude=0.5, lattice=oblique_lattice)
        hbar, h = 0.7, 1e-5
        k = np.array([0.11, -0.07])
        spec = solve_bands(potential, hbar, k, cutoff=8, n_bands=1, check_convergence=False)
        for axis in range(2):
            step = np.zeros(2)
            step[axis] = h
            plus = solve_bands(potential, hbar, k + step, cutoff=8, n_bands=1, check_convergence=False)
            minus = solve_bands(potential, hbar, k - step, cutoff=8, n_bands=1, check_convergence=False)
            slope = (plus.eigenvalues[0] - minus.eigenvalues[0]) / (2 * h) / hbar
            assert spec.group_velocities[0, axis] == pytest.approx(slope, rel=1e-4, abs=1e-7)

    def test_free_oblique_matches_plane_waves(self, oblique_lattice):
        """Test free eigenvalues equal |k + B* m|^2 / 2 on a sheared lattice"""
        free = FourierSeries.zero(oblique_lattice)
        k = np.array([0.1, 0.2])
        spec = solve_bands(free, 1.0, k, cutoff=6, n_bands=5, check_convergence=False)
        m = np.stack(np.meshgrid(np.arange(-6, 7), np.arange(-6, 7), indexing="ij"), axis=-1).reshape(-1, 2)
        expected = np.sort(0.5 * np.sum((k + m @ oblique_lattice.dual_basis.T) ** 2, axis=1))[:5]
        assert np.allclose(spec.eigenvalues, expected)

    def test_energy_max_selection(self, free_1d):
        """Test every band with E_n <= energy_max is returned"""
        spec = solve_bands(free_1d, 1.0, [0.3], cutoff=5, energy_max=1.0)
        assert spec.n_bands == 3

    def test_too_many_bands(self, cosine_1d):
        """Test n_bands >= half the basis raises CutoffTooSmall"""
        with pytest.raises(CutoffTooSmall, match="half"):
            solve_bands(cosine_1d, 1.0, [0.0], cutoff=2, n_bands=3)

    def test_unconverged_strict(self, cosine_1d):
        """Test a basis too small for hbar = 0.1 fails the convergence check"""
        with pytest.raises(CutoffTooSmall, match="changed"):
            solve_bands(cosine_1d, 0.1, [0.0], cutoff=3, n_bands=2)

    def test_unconverged_lenient(self, cosine_1d):
        """Test strict=False flags the bands instead of raising"""
        spec = solve_bands(cosine_1d, 0.1, [0.0], cutoff=3, n_bands=2, strict=False)
        assert not spec.converged.all()

    def test_invalid_arguments(self, cosine_1d):
        """Test hbar <= 0 and a missing band selection"""
        with pytest.raises(ValueError):
            solve_bands(cosine_1d, 0.0, [0.0], cutoff=5, n_bands=1)
        with pytest.raises(ValueError):
            solve_bands(cosine_1d, 1.0, [0.0], cutoff=5)


class TestBlochHamiltonian:
    """Tests for the truncated fiber matrix"""

    def test_matrix_hermitian(self, two_mode_1d):
        """Test the fiber matrix is Hermitian"""
        ham = BlochHamiltonian(potential=two_mode_1d, hbar=0.3, k=np.array([0.17]), cutoff=6)
        assert np.allclose(ham.matrix, ham.matrix.conj().T)

    def test_fft_apply_matches_matrix(self, two_mode_1d):
        """Test the convolution path agrees with the dense product"""
        ham = BlochHamiltonian(potential=two_mode_1d, hbar=0.3, k=np.array([0.17]), cutoff=10)
        vector = np.random.default_rng(3).normal(size=ham.size) + 0j
        dense = ham.matrix @ vector
        with patch("bloch_kam.spectra.bloch.DENSE_APPLY_LIMIT", 0):
            convolved = ham.apply(vector)
        assert np.allclose(convolved, dense)

    def test_fft_apply_two_dimensions(self, oblique_lattice):
        """Test the convolution path on a 2d basis"""
        potential = registry.create("cosine2d", lattice=oblique_lattice)
        ham = BlochHamiltonian(potential=potential, hbar=0.5, k=np.array([0.3, -0.2]), cutoff=4)
        vector = np.random.default_rng(5).normal(size=ham.size) + 1j
        with patch("bloch_kam.spectra.bloch.DENSE_APPLY_LIMIT", 0):
            convolved = ham.apply(vector)
        assert np.allclose(convolved, ham.matrix @ vector)

    def test_modes_sorted_by_kinetic_energy(self, free_1d):
        """Test the basis is ordered by |l* + k|"""
        ham = BlochHamiltonian(potential=free_1d, hbar=1.0, k=np.array([0.3]), cutoff=3)
        assert list(ham.modes[:3, 0]) == [0, -1, 1]


class TestGridsAndVolumes:
    """Tests for k-grids, cutoffs and phase-space volumes"""

    def test_brillouin_grid_offset(self, lattice_1d):
        """Test the offset grid is symmetric and avoids 0"""
        grid = brillouin_grid(lattice_1d, 4)
        assert np.allclose(grid[:, 0], [-0.375, -0.125, 0.125, 0.375])
        unshifted = brillouin_grid(lattice_1d, 4, offset=False)
        assert np.allclose(unshifted[:, 0], [-0.5, -0.25, 0.0, 0.25])

    def test_brillouin_grid_2d_shape(self, oblique_lattice):
        """Test n^2 cartesian points inside the dual cell"""
        grid = brillouin_grid(oblique_lattice, 3)
        kappa = oblique_lattice.reduced_momentum(grid)
        assert grid.shape == (9, 2)
        assert np.all(np.abs(kappa) < 0.5)

    def test_resolving_cutoff_free(self, free_1d):
        """Test the cutoff covers the energy ball twice over plus margin"""
        assert resolving_cutoff(free_1d, 1.0, 2.0) == 9
        assert resolving_cutoff(free_1d, 1.0, 0.2) == 7

    def test_free_volume_closed_form(self, free_1d):
        """Test vol H^{-1}([a, b]) = 4 pi (sqrt(2b) - sqrt(2a)) for V = 0 in 1d"""
        volume = phase_space_volume(free_1d, (1.0, 2.0))
        assert volume == pytest.approx(4 * np.pi * (2.0 - np.sqrt(2.0)), rel=1e-12)

    def test_free_volume_2d(self, free_2d):
        """Test vol H^{-1}([a, b]) = (2 pi)^2 2 pi (b - a) for V = 0 in 2d"""
        volume = phase_space_volume(free_2d, (1.0, 3.0))
        assert volume == pytest.approx(TWO_PI**2 * 2 * np.pi * 2.0, rel=1e-12)

    @pytest.mark.parametrize("fixture", ["lattice_1d", "lattice_2d"])
    def test_shell_constant(self, fixture, request):
        """Test c(delta) E^{d/2} equals the free shell volume"""
        lattice = request.getfixturevalue(fixture)
        free = FourierSeries.zero(lattice)
        E, delta = 4.0, 0.25
        expected = phase_space_volume(free, ((1 - delta) * E, (1 + delta) * E))
        assert shell_volume_constant(lattice, delta) * E ** (lattice.dimension / 2) == pytest.approx(expected)


class TestWeyl:
    """Tests for eigenvalue counts against the Weyl law"""

    def test_free_count(self, free_1d):
        """Test the exact count of (m + 0.3)^2 hbar^2 / 2 in [0.9, 1.1]"""
        result = weyl_count(free_1d, 0.05, [0.3], (0.9, 1.1))
        assert result.count == 5
        assert result.weyl_prediction == pytest.approx(5.663956, abs=1e-5)
        assert result.deviation == pytest.approx(abs(TWO_PI * 0.05 * 5 - result.volume))

    def test_interval_below_potential(self, cosine_1d):
        """Test an interval below V_min counts nothing"""
        result = weyl_count(cosine_1d, 0.1, [0.0], (-3.0, -2.0))
        assert result.count == 0
        assert result.weyl_prediction == 0.0

    def test_k_average_approaches_prediction(self, free_1d, lattice_1d):
        """Test the Brillouin average of the count is close to vol / (2 pi hbar)"""
        grid = brillouin_grid(lattice_1d, 8)
        counts = [weyl_count(free_1d, 0.05, k, (0.9, 1.1)).count for k in grid]
        assert float(np.mean(counts)) == pytest.approx(5.663956, abs=0.5)

    def test_scaling_report(self, free_1d, lattice_1d):
        """Test the sweep keeps one count per hbar and k-point"""
        grid = brillouin_grid(lattice_1d, 2)
        report = weyl_scaling_fit(free_1d, [0.1, 0.05], grid, (0.9, 1.1))
        assert report.hbars == [0.1, 0.05]
        assert [len(c) for c in report.counts] == [2, 2]
        assert report.volume == pytest.approx(phase_space_volume(free_1d, (0.9, 1.1)))
        assert len(report.deviations) == 2


class TestBandSweep:
    """Tests for k-grid sweeps"""

    def test_nan_padding(self, free_1d):
        """Test energy_max selections of different sizes are NaN-padded"""
        table = band_sweep(free_1d, 1.0, [[0.0], [0.45]], energy_max=0.2)
        assert table.eigenvalues.shape == (2, 2)
        assert table.valid.tolist() == [[True, False], [True, True]]
        assert table.cutoff == 7

    def test_needs_cutoff_or_energy(self, free_1d):
        """Test band_sweep refuses to guess a cutoff"""
        with pytest.raises(ValueError):
            band_sweep(free_1d, 1.0, [[0.0]], n_bands=1)

    def test_workers_do_not_change_results(self, cosine_1d, lattice_1d):
        """Test results are merged by k-index"""
        grid = brillouin_grid(lattice_1d, 6)
        serial = band_sweep(cosine_1d, 0.5, grid, cutoff=20, n_bands=3)
        threaded = band_sweep(cosine_1d, 0.5, grid, cutoff=20, n_bands=3, workers=3)
        assert np.array_equal(serial.eigenvalues, threaded.eigenvalues)

    def test_velocities_below_classical_speed(self, cosine_1d, lattice_1d):
        """Test |v_n(k)| <= sqrt(2 (E_n(k) - V_min)) on a full grid"""
        hbar = 0.2
        table = band_sweep(cosine_1d, hbar, brillouin_grid(lattice_1d, 64), cutoff=30, n_bands=10)
        v_min = cosine_1d.extrema[0]
        speed = np.sqrt(2 * (table.eigenvalues - v_min))
        assert np.all(np.abs(table.velocities[..., 0]) <= speed + 1e-8 / hbar)

    def test_grid_is_time_reversal_symmetric(self, cosine_1d, lattice_1d):
        """Test E_n(-k) = E_n(k) and v_n(-k) = -v_n(k) across the offset grid"""
        table = band_sweep(cosine_1d, 0.2, brillouin_grid(lattice_1d, 64), cutoff=30, n_bands=10)
        assert np.allclose(table.eigenvalues, table.eigenvalues[::-1], atol=1e-10, rtol=0)
        assert np.allclose(table.velocities, -table.velocities[::-1], atol=1e-8, rtol=0)

    def test_cache_round_trip(self, cosine_1d, lattice_1d, tmp_path):
        """Test the second sweep is served from the cache"""
        cache = BandCache(tmp_path / ".cache")
        grid = brillouin_grid(lattice_1d, 4)
        first = band_sweep(cosine_1d, 0.5, grid, cutoff=20, n_bands=2, cache=cache)
        second = band_sweep(cosine_1d, 0.5, grid, cutoff=20, n_bands=2, cache=cache)
        assert not first.cached
        assert second.cached
        assert np.array_equal(first.eigenvalues, second.eigenvalues)
        assert second.converged.dtype == bool
