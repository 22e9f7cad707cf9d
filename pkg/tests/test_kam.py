"""Tests for bloch_kam/kam/solver.py and bloch_kam/kam/family.py"""

import numpy as np
import pytest
from scipy import integrate

from bloch_kam.dynamics.flow import force_field, rotational_period
from bloch_kam.errors import EnergyBelowSeparatrix, SmallDivisorBreakdown, UnsupportedDimension
from bloch_kam.kam.family import (
    CellStatus,
    TorusFamily,
    cell_probes,
    kam_volume_fraction,
    shell_cells,
    threshold_energy,
)
from bloch_kam.kam.solver import (
    action_angle_d1,
    diophantine_margin,
    newton_torus,
    separatrix_energy,
    torus_at_action_d1,
    unperturbed_frequency,
)
from bloch_kam.lattice.core import TWO_PI, box_labels, torus_grid
from bloch_kam.models import DiophantineParams, TargetKind
from bloch_kam.parsers.potential import builtin_potential

GOLDEN = 0.5 * (np.sqrt(5.0) - 1.0)


class TestDiophantineMargin:
    """Tests for the Diophantine margin"""

    def test_one_dimension(self):
        """Test the margin of omega = 0.7 is attained at k = 1"""
        assert diophantine_margin([0.7], DiophantineParams(gamma=0.1, tau=3)) == pytest.approx(0.7)

    def test_resonant_pair(self):
        """Test omega = (1, 2) has margin 0"""
        assert diophantine_margin([1.0, 2.0], DiophantineParams(gamma=0.1, tau=3)) == 0.0

    def test_zero_frequency(self):
        """Test omega = 0 is rejected"""
        with pytest.raises(ValueError):
            diophantine_margin([0.0, 0.0], DiophantineParams(gamma=0.1, tau=3))


class TestRotationalTori:
    """Tests for exact tori in one dimension"""

    def test_free_torus(self, free_1d):
        """Test P = omega = sqrt(2E) and S_po = 0 for V = 0"""
        torus = action_angle_d1(free_1d, 2.0)
        assert torus.action[0] == pytest.approx(2.0)
        assert torus.frequency[0] == pytest.approx(2.0)
        assert np.allclose(torus.generating.S_po.dense, 0.0)
        assert torus.residual < 1e-12

    def test_cosine_torus_invariant(self, cosine_1d):
        """Test the energy residual of the generating function"""
        torus = action_angle_d1(cosine_1d, 2.0)
        assert torus.residual < 1e-9
        assert torus.energy == 2.0

    def test_frequency_matches_period(self, cosine_1d):
        """Test the torus velocity is 2 pi / T(E)"""
        torus = action_angle_d1(cosine_1d, 2.0)
        assert torus.velocity[0] == pytest.approx(TWO_PI / rotational_period(cosine_1d, 2.0), rel=1e-12)

    def test_negative_branch(self, cosine_1d):
        """Test sign = -1 flips action and frequency"""
        plus = action_angle_d1(cosine_1d, 2.0)
        minus = action_angle_d1(cosine_1d, 2.0, sign=-1)
        assert minus.sign == -1
        assert minus.action[0] == pytest.approx(-plus.action[0])
        assert minus.frequency[0] == pytest.approx(-plus.frequency[0])

    def test_angle_maps_inverse(self, two_mode_1d):
        """Test theta -> phi -> theta is the identity"""
        torus = action_angle_d1(two_mode_1d, 2.5)
        theta = torus_grid(1, 64)
        phi = torus.angle_map.to_configuration(theta)
        assert np.allclose(torus.angle_map.to_angle(phi), theta, atol=1e-9)

    def test_below_separatrix(self, cosine_1d):
        """Test E = V_max has no rotational torus"""
        with pytest.raises(EnergyBelowSeparatrix) as exc_info:
            action_angle_d1(cosine_1d, 1.0)
        assert exc_info.value.code == "kam-solver/EnergyBelowSeparatrix"

    def test_separatrix_margin(self, cosine_1d):
        """Test the margin above V_max scales with the oscillation of V"""
        assert separatrix_energy(cosine_1d) == pytest.approx(1.0 + 1e-3 * 3.0)

    def test_two_dimensions_rejected(self, cosine_2d):
        """Test quadrature tori need d = 1"""
        with pytest.raises(UnsupportedDimension):
            action_angle_d1(cosine_2d, 4.0)

    def test_free_torus_at_action(self, free_1d):
        """Test K(P) = P^2 / 2 is inverted exactly"""
        torus = torus_at_action_d1(free_1d, 3.0)
        assert torus.energy == pytest.approx(4.5, rel=1e-10)

    def test_cosine_torus_at_action(self, cosine_1d):
        """Test the action label is hit for both momentum signs"""
        plus = torus_at_action_d1(cosine_1d, 2.5)
        minus = torus_at_action_d1(cosine_1d, -2.5)
        assert plus.action[0] == pytest.approx(2.5, rel=1e-12)
        assert minus.action[0] == pytest.approx(-2.5, rel=1e-12)

    def test_action_inside_separatrix(self, cosine_1d):
        """Test an action below 4/pi has no rotational torus"""
        with pytest.raises(EnergyBelowSeparatrix):
            torus_at_action_d1(cosine_1d, 1.0)


class TestNewtonTorus:
    """Tests for the Fourier-Newton construction"""

    def test_unperturbed(self, cosine_2d):
        """Test eps = 0 gives the flat torus P = M^{-1} omega"""
        omega = np.array([1.0, np.sqrt(2.0)])
        torus = newton_torus(cosine_2d, omega, epsilon=0.0, n_grid=16)
        assert np.allclose(torus.action, omega)
        assert torus.energy == pytest.approx(1.5)
        assert torus.residual < 1e-12

    def test_small_perturbation(self, cosine_2d):
        """Test a golden-mean torus at eps = 0.02"""
        omega = np.array([1.0, GOLDEN])
        torus = newton_torus(cosine_2d, omega, epsilon=0.02, n_grid=32, tol=1e-10)
        assert torus.residual < 1e-8
        assert torus.iterations >= 1
        assert np.allclose(torus.velocity, omega)
        assert np.all(np.isfinite(torus.action))

    def test_action_target(self, cosine_2d):
        """Test the outer iteration meets an action target"""
        target = np.array([1.0, GOLDEN])
        torus = newton_torus(cosine_2d, target, epsilon=0.02, n_grid=32, tol=1e-10,
                             target_kind=TargetKind.ACTION)
        assert np.allclose(torus.action, target, atol=1e-9)

    def test_resonant_frequency(self, cosine_2d):
        """Test omega = (1, 2) fails the Diophantine check"""
        params = DiophantineParams(gamma=0.1, tau=5)
        with pytest.raises(SmallDivisorBreakdown) as exc_info:
            newton_torus(cosine_2d, [1.0, 2.0], epsilon=0.1, params=params)
        assert exc_info.value.code == "kam-solver/SmallDivisorBreakdown"

    def test_target_shape(self, cosine_2d):
        """Test a target of the wrong length is rejected"""
        with pytest.raises(ValueError):
            newton_torus(cosine_2d, [1.0], epsilon=0.1)

    def test_rescaled(self, cosine_1d):
        """Test the ballistic image of a torus"""
        torus = action_angle_d1(cosine_1d, 2.0).rescaled(4.0)
        base = action_angle_d1(cosine_1d, 2.0)
        assert torus.action[0] == pytest.approx(base.action[0] / 2.0)
        assert torus.energy == pytest.approx(0.5)
        assert torus.epsilon == pytest.approx(0.25)

    def test_unperturbed_frequency(self, oblique_lattice):
        """Test omega_0 = M P"""
        action = np.array([0.4, -1.1])
        assert np.allclose(unperturbed_frequency(oblique_lattice, action), oblique_lattice.M @ action)

    def test_first_order_remainder_is_quadratic(self):
        """Test S_po - eps V_m / (i omega.m) shrinks fourfold when eps halves"""
        potential = builtin_potential("cosine2d", amplitude=0.1)
        omega = np.array([1.0, GOLDEN])
        labels = box_labels(2, 6)
        labels = labels[np.any(labels != 0, axis=1)]
        remainders = []
        for eps in (0.2, 0.1):
            torus = newton_torus(potential, omega, epsilon=eps, n_grid=32, tol=1e-10)
            assert torus.residual < 1e-8
            first_order = [eps * potential.coefficient(m) / (1j * float(omega @ m)) for m in labels]
            exact = [torus.generating.S_po.coefficient(m) for m in labels]
            remainders.append(max(abs(s - f) for s, f in zip(exact, first_order)))
        assert remainders[1] / remainders[0] == pytest.approx(0.25, rel=0.15)

    @pytest.mark.slow
    def test_d1_orbit_stays_on_torus_graph(self, cosine_1d):
        """Test an orbit started on the torus stays within 1e-7 of J(q) for 10^3 time units"""
        torus = action_angle_d1(cosine_1d, 2.0)
        force = force_field(cosine_1d)
        q0 = 0.3
        p0 = float(torus.momentum([[q0]])[0, 0])

        def rhs(t, y):
            return [y[1], float(force(np.array([[y[0]]]))[0, 0])]

        times = np.linspace(0.0, 1e3, 20001)
        solution = integrate.solve_ivp(rhs, (0.0, 1e3), [q0, p0], method="DOP853", t_eval=times,
                                       rtol=1e-12, atol=1e-12)
        assert solution.success
        q, p = solution.y
        graph = torus.momentum(np.mod(q, TWO_PI)[:, None])[:, 0]
        assert np.max(np.abs(p - graph)) < 1e-7
        assert q[-1] > q0 + 1e3


class TestKamVolume:
    """Tests for KAM-volume scans"""

    def test_d1_above_separatrix(self, cosine_1d):
        """Test the whole shell is rotational above V_max"""
        report = kam_volume_fraction(cosine_1d, (1.8, 2.2))
        assert report.fraction == 1.0
        assert report.energy == pytest.approx(2.0)
        assert report.delta == pytest.approx(0.1)
        assert report.kam_volume == report.shell_volume

    def test_d1_straddling_separatrix(self, cosine_1d):
        """Test a shell crossing the separatrix keeps only the rotational part"""
        report = kam_volume_fraction(cosine_1d, (0.5, 1.5))
        assert 0.0 < report.fraction < 1.0
        assert report.fraction == pytest.approx(report.kam_volume / report.shell_volume)
        assert report.complement_volume > 0.0

    def test_d1_below_separatrix(self, cosine_1d):
        """Test a librating shell has no KAM volume"""
        report = kam_volume_fraction(cosine_1d, (0.45, 0.55))
        assert report.fraction == 0.0

    def test_shell_cells(self, free_2d):
        """Test the eight cells of an 8 x 8 grid inside the unit shell"""
        centres, width = shell_cells(free_2d, 0.1, 8)
        kinetic = 0.5 * np.sum(centres**2, axis=1)
        assert len(centres) == 8
        assert np.all((kinetic >= 0.9) & (kinetic <= 1.1))
        assert np.allclose(width, 2 * np.sqrt(2.2) / 8)

    def test_cell_probes_inside_cell(self):
        """Test probes start at the centre and stay inside the cell"""
        centre = np.array([1.0, -0.5])
        width = np.array([0.2, 0.4])
        probes = cell_probes(centre, width)
        assert np.array_equal(probes[0], centre)
        assert len(probes) == 5
        assert np.all(np.abs(probes - centre) <= 0.5 * width)

    def test_d2_free_scan(self, free_2d):
        """Test the free flow never fails a torus construction"""
        report = kam_volume_fraction(free_2d, (0.9, 1.1), grid_size=8, n_grid=16)
        assert report.n_cells == 8
        assert report.n_failed == 0
        assert report.n_success + report.n_resonant == 8
        assert report.n_success >= 1
        assert all(c.status in (CellStatus.ACCEPTED, CellStatus.RESONANT) for c in report.cells)
        assert report.summary()["n_cells"] == 8

    def test_threshold_energy(self, cosine_1d):
        """Test the lowest energy with fraction above one half"""
        reports = [kam_volume_fraction(cosine_1d, iv) for iv in [(0.45, 0.55), (1.8, 2.2), (3.6, 4.4)]]
        assert threshold_energy(reports) == pytest.approx(2.0)
        assert threshold_energy(reports[:1]) is None


class TestTorusFamily:
    """Tests for torus families"""

    def test_d1_distance(self, cosine_1d):
        """Test distances to the accepted action interval"""
        family = TorusFamily.build(cosine_1d, (1.8, 2.2))
        low, high = family.accepted_actions[2:, 0]
        assert family.distance([[0.5 * (low + high)]])[0] == 0.0
        assert family.distance([[-(high + 0.1)]])[0] == pytest.approx(0.1)
        assert len(family.accepted_actions) == 4

    def test_d1_torus_cache(self, cosine_1d):
        """Test tori are built once per action"""
        family = TorusFamily.build(cosine_1d, (1.8, 2.2))
        first = family.torus_at([2.0])
        assert family.torus_at([2.0]) is first

    def test_empty_family(self, cosine_1d):
        """Test a librating shell gives an empty family"""
        family = TorusFamily.build(cosine_1d, (0.45, 0.55))
        assert family.is_empty
        assert np.isinf(family.distance([[1.0]])[0])

    def test_d2_distance(self, free_2d):
        """Test accepted cell centres are at distance 0"""
        family = TorusFamily.build(free_2d, (0.9, 1.1), grid_size=8, n_grid=16)
        assert not family.is_empty
        centre = family.accepted_actions[0]
        assert family.distance(centre[None, :])[0] == 0.0
        assert family.distance([[10.0, 10.0]])[0] > 5.0

    def test_action_box(self, cosine_1d):
        """Test the action box covers sqrt(2 (b - V_min))"""
        family = TorusFamily.build(cosine_1d, (1.8, 2.2))
        assert family.action_box()[0] == pytest.approx(np.sqrt(2.0 * 3.2))
