import numpy as np
import pytest

from core.model import init_params
from core.pooling import FeatureSequence
from models.config_models import HyperParams, ModelDims


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run desk-scale experiments")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_hyper():
    return HyperParams(hidden=(6, 4), **{"lambda": 1.0})


@pytest.fixture
def small_params(small_hyper):
    return init_params(ModelDims(D=8, C=3, h1=6, h2=4), seed=3, hyper=small_hyper)


@pytest.fixture
def small_seq(rng):
    return FeatureSequence(rng.normal(size=(5, 8)), label=1, id="s0")
