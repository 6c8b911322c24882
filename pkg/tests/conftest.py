import numpy as np
import pytest

from sketchrom.benchmarks import CloakConfig, ThermalBlockConfig, build_cloak, build_thermal_block

from _problems import random_problem


@pytest.fixture(scope="session")
def small_thermal():
    return build_thermal_block(ThermalBlockConfig(dim=2, res=8))


@pytest.fixture(scope="session")
def mid_thermal():
    return build_thermal_block(ThermalBlockConfig(dim=2, res=32))


@pytest.fixture(scope="session")
def small_cloak():
    return build_cloak(CloakConfig(layers=3, kappa0=5.0, res=24, scatterer_cells=4, layer_cells=2))


@pytest.fixture(params=["real", "complex"])
def rand_problem(request):
    return random_problem(60, request.param, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
