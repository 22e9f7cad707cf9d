"""Pytest configuration and fixtures for bloch-kam tests"""

import numpy as np
import pytest

from bloch_kam.lattice.core import FourierSeries, make_lattice, standard_lattice
from bloch_kam.models import RunConfig
from bloch_kam.parsers.potential import builtin_potential


@pytest.fixture
def lattice_1d():
    """The lattice 2 pi Z"""
    return standard_lattice(1)


@pytest.fixture
def lattice_2d():
    """The lattice 2 pi Z^2"""
    return standard_lattice(2)


@pytest.fixture
def oblique_lattice():
    """A sheared 2d lattice with unequal basis lengths"""
    return make_lattice(np.array([[2.0, 0.7], [0.0, 3.0]]))


@pytest.fixture
def cosine_1d():
    """V(q) = cos q on 2 pi Z"""
    return builtin_potential("cosine", amplitude=1.0)


@pytest.fixture
def cosine_2d():
    """V(q) = cos q_1 + cos q_2 on 2 pi Z^2"""
    return builtin_potential("cosine2d", amplitude=1.0)


@pytest.fixture
def free_1d(lattice_1d):
    """V = 0 in one dimension"""
    return FourierSeries.zero(lattice_1d)


@pytest.fixture
def free_2d(lattice_2d):
    """V = 0 in two dimensions"""
    return FourierSeries.zero(lattice_2d)


@pytest.fixture
def two_mode_1d(lattice_1d):
    """V(q) = cos q + 0.3 sin 2q, a non-symmetric smooth potential"""
    return FourierSeries.from_coefficients(
        lattice_1d, {(1,): 0.5, (-1,): 0.5, (2,): -0.15j, (-2,): 0.15j}, hermitian=True
    )


@pytest.fixture
def run_config(tmp_path):
    """Default run configuration writing into a temporary directory"""
    return RunConfig(output_dir=str(tmp_path / "out"), seed=11)
