import os

import numpy as np
import pytest
from hypothesis import settings

from battkit.cell import cell_model
from battkit.observer import build_vertices, design_gain
from battkit.params import default_params

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def params():
    return default_params()


@pytest.fixture(scope="session")
def model(params):
    return cell_model(params, 4, 4)


@pytest.fixture(scope="session")
def vertices(model):
    return build_vertices(model)


@pytest.fixture(scope="session")
def design(model, vertices):
    return design_gain(model.A, model.E, vertices)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
