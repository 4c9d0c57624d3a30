import numpy as np
import pytest

from rendertrack.geometry import Camera, make_prototype_sphere


@pytest.fixture(scope="session")
def sphere():
    return make_prototype_sphere()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def cam32():
    return Camera(32, 32)
