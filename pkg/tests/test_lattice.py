"""Tests for bloch_kam/lattice/core.py"""

import numpy as np
import pytest

from bloch_kam.errors import NonpositiveEnergy, PotentialFormatError, SingularBasis, UnsupportedDimension
from bloch_kam.lattice.core import (
    TWO_PI,
    FourierSeries,
    PhasePoint,
    ballistic_rescale,
    dense_to_grid,
    fourier_eval,
    fourier_gradient,
    grid_to_dense,
    hamiltonian,
    inverse_ballistic_rescale,
    make_lattice,
    periodic_mean,
    potential_extrema,
    scaled_hamiltonian,
    spectral_gradient,
    standard_eval,
    torus_grid,
)
from bloch_kam.parsers.potential import registry


class TestMakeLattice:
    """Tests for lattice construction"""

    def test_singular_basis_rejected(self):
        """Test a rank-deficient basis raises SingularBasis"""
        with pytest.raises(SingularBasis):
            make_lattice(np.array([[1.0, 2.0], [2.0, 4.0]]))

    def test_three_dimensions_rejected(self):
        """Test d = 3 raises UnsupportedDimension"""
        with pytest.raises(UnsupportedDimension):
            make_lattice(np.eye(3))

    def test_non_square_rejected(self):
        """Test a non-square basis raises UnsupportedDimension"""
        with pytest.raises(UnsupportedDimension):
            make_lattice(np.ones((2, 3)))

    def test_standard_lattice_matrices(self, lattice_2d):
        """Test 2 pi Z^2 has L = M = I and dual basis Z^2"""
        assert np.allclose(lattice_2d.L, np.eye(2))
        assert np.allclose(lattice_2d.M, np.eye(2))
        assert np.allclose(lattice_2d.dual_basis, np.eye(2))
        assert lattice_2d.cell_volume == pytest.approx(TWO_PI**2)
        assert lattice_2d.is_standard

    def test_dual_pairing(self, oblique_lattice):
        """Test <l_i, l*_j> = 2 pi delta_ij on an oblique lattice"""
        pairing = oblique_lattice.basis.T @ oblique_lattice.dual_basis
        assert np.allclose(pairing, TWO_PI * np.eye(2))
        assert not oblique_lattice.is_standard

    def test_metric_inverse(self, oblique_lattice):
        """Test M and M_inv are inverse and symmetric"""
        assert np.allclose(oblique_lattice.M @ oblique_lattice.M_inv, np.eye(2))
        assert np.allclose(oblique_lattice.M, oblique_lattice.M.T)


class TestReductions:
    """Tests for torus and Brillouin reductions"""

    def test_reduce_position_idempotent(self, oblique_lattice):
        """Test reducing twice gives the same representative"""
        q = np.array([[7.3, -4.1], [0.2, 11.0]])
        once = oblique_lattice.reduce_position(q)
        assert np.allclose(oblique_lattice.reduce_position(once), once)

    def test_reduce_position_differs_by_lattice_vector(self, oblique_lattice):
        """Test the representative differs from q by an integer combination of the basis"""
        q = np.array([7.3, -4.1])
        shift = q - oblique_lattice.reduce_position(q)
        coords = np.linalg.solve(oblique_lattice.basis, shift)
        assert np.allclose(coords, np.round(coords))

    def test_reduce_momentum_centred(self, lattice_1d):
        """Test k is mapped into [-1/2, 1/2) for the dual lattice Z"""
        assert lattice_1d.reduce_momentum(np.array([2.3]))[0] == pytest.approx(0.3)
        assert lattice_1d.reduce_momentum(np.array([-0.8]))[0] == pytest.approx(0.2)

    def test_phase_point_reduced(self, lattice_1d):
        """Test PhasePoint.reduced keeps p and wraps q"""
        x = PhasePoint.reduced([1.5], [TWO_PI + 0.25], lattice_1d)
        assert x.p[0] == 1.5
        assert x.q[0] == pytest.approx(0.25)


class TestFourierSeries:
    """Tests for trigonometric series"""

    def test_cosine_values(self, cosine_1d):
        """Test cos q at 0 and pi"""
        assert fourier_eval(cosine_1d, 0.0) == pytest.approx(1.0)
        assert fourier_eval(cosine_1d, np.pi) == pytest.approx(-1.0)

    def test_cosine_gradient(self, cosine_1d):
        """Test d/dq cos q = -1 at pi/2"""
        assert fourier_gradient(cosine_1d, np.pi / 2)[0] == pytest.approx(-1.0)

    def test_two_mode_matches_closed_form(self, two_mode_1d):
        """Test evaluation against cos q + 0.3 sin 2q"""
        q = np.linspace(0.0, TWO_PI, 17)
        expected = np.cos(q) + 0.3 * np.sin(2 * q)
        assert np.allclose(fourier_eval(two_mode_1d, q[:, None]), expected)

    def test_non_hermitian_flagged_real_rejected(self, lattice_1d):
        """Test a series flagged real must satisfy c_-m = conj(c_m)"""
        with pytest.raises(PotentialFormatError):
            FourierSeries.from_coefficients(lattice_1d, {(1,): 1.0, (-1,): 0.2}, hermitian=True)

    def test_grid_matches_pointwise(self, two_mode_1d):
        """Test on_grid samples agree with standard_eval on the same grid"""
        n = 16
        phi = torus_grid(1, n)
        assert np.allclose(two_mode_1d.on_grid(n), standard_eval(two_mode_1d, phi))

    def test_grid_transfer_recovers_coefficients(self, two_mode_1d):
        """Test grid_to_dense inverts dense_to_grid"""
        values = dense_to_grid(two_mode_1d.dense, 16)
        assert np.allclose(grid_to_dense(values, two_mode_1d.cutoff), two_mode_1d.dense)

    def test_grid_too_small(self, two_mode_1d):
        """Test a grid that cannot hold the cutoff is rejected"""
        with pytest.raises(ValueError):
            dense_to_grid(two_mode_1d.dense, 4)

    def test_digest_depends_on_coefficients(self, cosine_1d):
        """Test scaled series hash differently"""
        assert cosine_1d.digest() != cosine_1d.scaled(2.0).digest()
        assert cosine_1d.digest() == cosine_1d.scaled(1.0).digest()

    def test_oblique_standard_eval(self, oblique_lattice):
        """Test standard_eval(phi) equals fourier_eval at q = L phi"""
        series = registry.create("cosine2d", lattice=oblique_lattice)
        phi = np.array([[0.3, 1.7], [2.0, -0.4]])
        q = phi @ oblique_lattice.L.T
        assert np.allclose(standard_eval(series, phi), fourier_eval(series, q))


class TestExtrema:
    """Tests for potential extrema"""

    def test_cosine_extrema(self, cosine_1d):
        """Test (V_min, V_max) = (-1, 1) for cos q"""
        v_min, v_max = potential_extrema(cosine_1d)
        assert v_min == pytest.approx(-1.0, abs=1e-10)
        assert v_max == pytest.approx(1.0, abs=1e-10)

    def test_constant_extrema(self, free_1d):
        """Test a constant series has equal extrema"""
        assert potential_extrema(free_1d) == (0.0, 0.0)

    def test_two_dimensional_extrema(self, cosine_2d):
        """Test cos q1 + cos q2 spans [-2, 2]"""
        v_min, v_max = cosine_2d.extrema
        assert v_min == pytest.approx(-2.0, abs=1e-9)
        assert v_max == pytest.approx(2.0, abs=1e-9)


class TestBallisticRescale:
    """Tests for the ballistic map"""

    def test_nonpositive_energy(self, lattice_1d):
        """Test E <= 0 raises NonpositiveEnergy"""
        x = PhasePoint(p=np.array([1.0]), q=np.array([0.0]))
        with pytest.raises(NonpositiveEnergy):
            ballistic_rescale(x, 0.0, lattice_1d)
        with pytest.raises(NonpositiveEnergy):
            inverse_ballistic_rescale(np.array([1.0]), np.array([0.0]), -1.0, lattice_1d)

    def test_inverse(self, oblique_lattice):
        """Test the inverse map recovers the reduced point"""
        x = PhasePoint.reduced([0.4, -1.3], [0.5, 0.9], oblique_lattice)
        J, phi = ballistic_rescale(x, 9.0, oblique_lattice)
        back = inverse_ballistic_rescale(J, phi, 9.0, oblique_lattice)
        assert np.allclose(back.p, x.p)
        assert np.allclose(back.q, x.q)

    def test_scaled_hamiltonian(self, oblique_lattice):
        """Test H_{1/E}(M_E x) = H(x) / E"""
        potential = registry.create("cosine2d", amplitude=0.7, lattice=oblique_lattice)
        p = np.array([1.2, -0.5])
        q = np.array([0.3, 2.2])
        E = 6.0
        J, phi = ballistic_rescale(PhasePoint(p=p, q=q), E, oblique_lattice)
        lhs = scaled_hamiltonian(potential, J, phi, 1.0 / E)[0]
        rhs = hamiltonian(potential, p, q)[0] / E
        assert lhs == pytest.approx(rhs, rel=1e-12)


class TestQuadrature:
    """Tests for periodic quadrature and spectral derivatives"""

    def test_periodic_mean(self):
        """Test the mean of cos^2 is 1/2"""
        assert periodic_mean(lambda t: np.cos(t) ** 2) == pytest.approx(0.5, rel=1e-13)

    def test_spectral_gradient(self):
        """Test d/dphi sin phi = cos phi on a grid"""
        phi = TWO_PI * np.arange(32) / 32
        grad = spectral_gradient(np.sin(phi))
        assert np.allclose(grad[0], np.cos(phi))
