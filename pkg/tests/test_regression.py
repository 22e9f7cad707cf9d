"""Tests for bloch_kam/fits/regression.py"""

import numpy as np
import pytest

from bloch_kam.fits.regression import fit_power_law, skipped_fit


class TestFitPowerLaw:
    """Tests for log-log fits"""

    def test_exact_power_law(self):
        """Test y = 3 x^2 is recovered exactly"""
        x = np.array([0.1, 0.05, 0.025, 0.0125])
        fit = fit_power_law(x, 3.0 * x**2)
        assert fit.slope == pytest.approx(2.0)
        assert np.exp(fit.intercept) == pytest.approx(3.0)
        assert fit.n_points == 4
        assert not fit.skipped
        assert fit.predict(0.2) == pytest.approx(0.12)

    def test_floor_drops_points(self):
        """Test values at or below the floor are excluded"""
        fit = fit_power_law([1.0, 2.0, 4.0, 8.0], [1.0, 0.5, 0.25, 1e-14], floor=1e-12)
        assert fit.n_points == 3
        assert fit.slope == pytest.approx(-1.0)

    def test_too_few_points(self):
        """Test a fit with one usable point is skipped"""
        fit = fit_power_law([1.0, 2.0], [1.0, 0.0])
        assert fit.skipped
        assert np.isnan(fit.slope)
        assert "1 points" in fit.reason

    def test_non_finite_ignored(self):
        """Test NaN ordinates do not enter the fit"""
        fit = fit_power_law([1.0, 2.0, 4.0], [2.0, float("nan"), 8.0])
        assert fit.n_points == 2
        assert fit.slope == pytest.approx(1.0)

    def test_as_dict(self):
        """Test the fit dumps to plain data"""
        data = skipped_fit("no data").as_dict()
        assert data["skipped"] is True
        assert data["reason"] == "no data"
        assert data["n_points"] == 0
