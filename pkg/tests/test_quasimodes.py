"""Tests for bloch_kam/quasimodes/builder.py and bloch_kam/quasimodes/separation.py"""

from types import SimpleNamespace

import numpy as np
import pytest

from bloch_kam.dynamics.flow import rotational_period
from bloch_kam.fits.regression import fit_power_law
from bloch_kam.kam.family import TorusFamily
from bloch_kam.kam.solver import torus_at_action_d1
from bloch_kam.lattice.core import TWO_PI, FourierSeries, standard_eval, torus_grid
from bloch_kam.quasimodes.builder import (
    apply_transport,
    assemble_quasimode,
    leading_amplitude,
    transport_solve,
)
from bloch_kam.quasimodes.separation import (
    admissible_momenta,
    build_quasimodes,
    counting_bracket,
    near_degeneracy_fraction,
    projection_defect,
    quasimode_velocity,
    residual_and_match,
    separation_classify,
    spectrum_for,
)

SHELL = (1.8, 2.2)


@pytest.fixture
def free_family(free_1d):
    """Rotational tori of the free flow over the shell [1.8, 2.2]"""
    return TorusFamily.build(free_1d, SHELL)


@pytest.fixture
def cosine_family(cosine_1d):
    """Rotational tori of V = cos q over the shell [1.8, 2.2]"""
    return TorusFamily.build(cosine_1d, SHELL)


def _index_of(qm, label):
    return int(np.flatnonzero(qm.modes[:, 0] == label)[0])


class TestLeadingAmplitude:
    """Tests for the leading amplitude"""

    def test_free_amplitude_is_one(self, free_1d):
        """Test S_po = 0 gives A_0 = 1 and a uniform density"""
        lead = leading_amplitude(torus_at_action_d1(free_1d, 1.5))
        phi = torus_grid(1, 32)
        assert np.allclose(standard_eval(lead.amplitude, phi), 1.0, atol=1e-12)
        assert np.allclose(standard_eval(lead.density, phi), 1.0, atol=1e-12)
        assert lead.min_jacobian == pytest.approx(1.0)

    def test_density_is_time_average(self, cosine_1d):
        """Test the invariant density equals 2 pi / (|p(q)| T(E))"""
        torus = torus_at_action_d1(cosine_1d, 2.0)
        energy = torus.energy
        lead = leading_amplitude(torus)
        phi = torus_grid(1, 1024)
        p = np.sqrt(2.0 * (energy - np.cos(phi[:, 0])))
        expected = TWO_PI / (p * rotational_period(cosine_1d, energy))
        assert np.allclose(np.real(standard_eval(lead.density, phi)), expected, atol=1e-6)

    def test_amplitude_is_transported(self, cosine_1d):
        """Test T A_0 = 0 on the grid"""
        torus = torus_at_action_d1(cosine_1d, 2.0)
        lead = leading_amplitude(torus)
        assert np.max(np.abs(apply_transport(torus, lead.amplitude, lead.n_grid))) < 1e-8


class TestTransportSolve:
    """Tests for the transport equation solver"""

    def test_constant_multiple(self, free_1d, lattice_1d):
        """Test f = c A_0 gives E = -c and a vanishing amplitude"""
        torus = torus_at_action_d1(free_1d, 1.0)
        lead = leading_amplitude(torus)
        f = FourierSeries.from_coefficients(lattice_1d, {(0,): 0.7})
        solution = transport_solve(torus, lead.amplitude, f)
        assert solution.energy == pytest.approx(-0.7)
        assert np.max(np.abs(solution.amplitude.dense)) < 1e-12

    def test_single_mode(self, free_1d, lattice_1d):
        """Test f = e^{iQ} on omega = 1 is inverted by T = -i d/dQ"""
        torus = torus_at_action_d1(free_1d, 1.0)
        assert torus.frequency[0] == pytest.approx(1.0)
        lead = leading_amplitude(torus)
        f = FourierSeries.from_coefficients(lattice_1d, {(1,): 1.0})
        solution = transport_solve(torus, lead.amplitude, f)
        assert solution.energy == pytest.approx(0.0, abs=1e-12)
        assert solution.amplitude.coefficient((1,)) == pytest.approx(1.0, abs=1e-10)
        assert solution.residual < 1e-10

    def test_smooth_source_on_cosine_torus(self, cosine_1d, lattice_1d):
        """Test the pointwise transport residual of a smooth source"""
        torus = torus_at_action_d1(cosine_1d, 2.0)
        lead = leading_amplitude(torus)
        f = FourierSeries.from_coefficients(
            lattice_1d, {(1,): 0.4 - 0.2j, (-1,): 0.4 + 0.2j, (2,): 0.1j, (-3,): 0.05}
        )
        solution = transport_solve(torus, lead.amplitude, f, n_grid=1024)
        assert solution.residual < 1e-6


class TestAssembleQuasimode:
    """Tests for quasimode assembly"""

    def test_free_plane_wave(self, free_family):
        """Test V = 0 yields the plane wave with E = hbar^2 (m + k)^2 / 2"""
        qm = assemble_quasimode(free_family, [17], 0.3, 0.1, order=2)
        assert qm.energy == pytest.approx(0.5 * (0.1 * 17.3) ** 2, rel=1e-10)
        assert abs(qm.wavefunction[_index_of(qm, 17)]) == pytest.approx(1.0, abs=1e-10)
        assert qm.residual_norm < 1e-8
        assert all(r < 1e-8 for r in qm.transport_residuals)

    def test_normalised(self, cosine_family):
        """Test the wavefunction has unit norm"""
        qm = assemble_quasimode(cosine_family, [19], 0.3, 0.1, order=2)
        assert np.linalg.norm(qm.wavefunction) == pytest.approx(1.0, abs=1e-12)
        assert qm.label == (19,)
        assert qm.dimension == 1

    def test_first_correction_vanishes(self, cosine_family):
        """Test E_1 = 0 and the series has N + 2 terms"""
        qm = assemble_quasimode(cosine_family, [19], 0.3, 0.1, order=3)
        assert qm.energies[1] == 0.0
        assert len(qm.energies) == 5
        assert len(qm.amplitudes) == 4
        assert qm.energies[0] == pytest.approx(qm.torus.energy)

    def test_action_matches_label(self, cosine_family):
        """Test the torus carries the Bloch action hbar (m + k)"""
        qm = assemble_quasimode(cosine_family, [-20], 0.3, 0.1, order=1)
        assert qm.action[0] == pytest.approx(0.1 * (-19.7), rel=1e-12)

    @pytest.mark.slow
    def test_residual_scaling(self, cosine_family):
        """Test the residual decays at least like hbar^4.5 for N = 3"""
        hbars = [0.1, 0.07, 0.05, 0.035, 0.025]
        residuals = []
        for hbar in hbars:
            label = int(round(1.95 / hbar - 0.3))
            qm = assemble_quasimode(cosine_family, [label], 0.3, hbar, order=3)
            residuals.append(qm.residual_norm)
        fit = fit_power_law(hbars, residuals)
        assert not fit.skipped
        assert fit.slope >= 4.5


class TestAdmissibleMomenta:
    """Tests for admissible labels"""

    def test_free_labels(self, free_family):
        """Test labels whose actions lie within hbar^1.5 of the shell actions"""
        admissible = admissible_momenta(0.3, 0.1, 1.5, free_family)
        assert admissible.members == [(-21,), (-20,), (-19,), (19,), (20,)]
        assert np.all(admissible.distances <= 0.1**1.5)
        assert len(admissible) == 5

    def test_empty_family(self, cosine_1d):
        """Test a librating shell admits no labels"""
        family = TorusFamily.build(cosine_1d, (0.45, 0.55))
        admissible = admissible_momenta(0.0, 0.1, 1.5, family)
        assert len(admissible) == 0
        assert admissible.labels.shape == (0, 1)


class TestMatching:
    """Tests for eigenpair matching"""

    def test_free_exact_match(self, free_family):
        """Test the plane wave coincides with an eigenvector"""
        qm = assemble_quasimode(free_family, [19], 0.3, 0.1, order=1)
        spectrum = spectrum_for([qm], window=0.01)
        report = residual_and_match(qm, spectrum, window_exponent=2.0)
        assert report.spectral_distance < 1e-8
        assert report.simple_window
        assert report.overlap == pytest.approx(1.0, abs=1e-8)
        assert report.aligned_distance < 1e-6

    def test_distance_bound(self, cosine_family):
        """Test the nearest eigenvalue lies within the residual"""
        qm = assemble_quasimode(cosine_family, [19], 0.3, 0.1, order=2)
        spectrum = spectrum_for([qm], window=0.01)
        report = residual_and_match(qm, spectrum, window_exponent=2.0)
        assert report.distance_bound_holds
        if report.simple_window:
            assert report.eigenvector_bound_holds

    def test_projection_defect_free(self, free_family):
        """Test the plane wave lies in its spectral window"""
        qm = assemble_quasimode(free_family, [20], 0.3, 0.1, order=1)
        spectrum = spectrum_for([qm], window=0.01)
        defect = projection_defect(qm, spectrum, window_exponent=2.0)
        assert defect.defect < 1e-6
        assert defect.holds


class TestSeparation:
    """Tests for separation sets"""

    def test_free_labels_all_simple(self, free_family):
        """Test distinct plane-wave energies are separated and simple"""
        admissible = admissible_momenta(0.3, 0.1, 1.5, free_family)
        quasimodes = build_quasimodes(free_family, admissible, order=2)
        spectrum = spectrum_for(quasimodes, window=0.01)
        report = separation_classify(quasimodes, spectrum, 0.1, 2)
        assert report.separated == admissible.members
        assert report.simple == admissible.members
        assert report.injective
        assert report.bound_violations == []
        assert report.summary()["simple"] == 5

    def test_symmetric_pairs_not_separated(self, free_family):
        """Test k = 0 pairs +-m at equal energy and leaves the set empty"""
        admissible = admissible_momenta(0.0, 0.1, 1.5, free_family)
        quasimodes = build_quasimodes(free_family, admissible, order=1)
        spectrum = spectrum_for(quasimodes, window=0.1)
        report = separation_classify(quasimodes, spectrum, 0.1, 1)
        assert report.labels == [(-20,), (-19,), (19,), (20,)]
        assert report.separated == []
        assert report.simple == []

    def test_near_degeneracy_fraction(self):
        """Test the share of k-points with a close pair"""
        close = [SimpleNamespace(energy=1.0), SimpleNamespace(energy=1.001)]
        apart = [SimpleNamespace(energy=1.0), SimpleNamespace(energy=2.0)]
        assert near_degeneracy_fraction([close, apart], 0.1, 2) == pytest.approx(0.5)
        assert near_degeneracy_fraction([], 0.1, 2) == 0.0

    def test_counting_bracket(self):
        """Test the bracket and its relative form"""
        bracket = counting_bracket(6.5, 0.2, 0.1, 0.1, 10.0, 1, shell_volume=TWO_PI)
        assert bracket.value == pytest.approx(TWO_PI)
        assert bracket.lower == pytest.approx(6.2)
        assert bracket.upper == pytest.approx(6.6)
        assert bracket.inside
        assert bracket.relative == pytest.approx(0.0, abs=1e-12)


class TestQuasimodeVelocity:
    """Tests for quasimode velocities"""

    def test_free_velocity(self, free_family):
        """Test a plane wave moves at hbar (m + k)"""
        qm = assemble_quasimode(free_family, [19], 0.3, 0.1, order=1)
        report = quasimode_velocity(qm)
        assert report.expectation[0] == pytest.approx(1.93, rel=1e-8)
        assert report.classical[0] == pytest.approx(1.93, rel=1e-8)
        assert report.measure_average[0] == pytest.approx(1.93, rel=1e-8)
        assert report.difference < 1e-8
        assert report.projection_residual is None

    def test_projection_residual(self, cosine_family):
        """Test the per-band residual is reported with a spectrum"""
        qm = assemble_quasimode(cosine_family, [19], 0.3, 0.1, order=2)
        spectrum = spectrum_for([qm], window=0.01)
        report = quasimode_velocity(qm, spectrum)
        assert report.projection_residual is not None
        assert report.projection_residual >= 0.0
        assert report.difference < 0.5

    @pytest.mark.slow
    def test_velocity_error_shrinks_with_hbar(self, cosine_family):
        """Test halving hbar at least halves |<v> - dK| at a fixed energy"""
        errors = []
        for hbar in (0.1, 0.05):
            label = int(round(1.95 / hbar - 0.3))
            qm = assemble_quasimode(cosine_family, [label], 0.3, hbar, order=2)
            errors.append(quasimode_velocity(qm).difference)
        assert errors[0] < 0.1
        assert errors[1] <= 0.65 * errors[0] + 1e-10
