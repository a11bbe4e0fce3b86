import numpy as np
import pytest

from ubmcmc.models import make_data, make_model


@pytest.fixture(scope="session")
def toy_data():
    stream = np.random.default_rng(2024)
    return make_data("toy", stream, theta=1.0, x_true=np.array([2.0, -2.0]))


@pytest.fixture(scope="session")
def toy_model(toy_data):
    return make_model("toy", toy_data, 1.0)


@pytest.fixture(scope="session")
def elliptic_data():
    stream = np.random.default_rng(99)
    return make_data(
        "elliptic", stream, theta=100.0, x_true=np.array([0.6, -0.4]), level=10
    )


@pytest.fixture(scope="session")
def elliptic_model(elliptic_data):
    return make_model("elliptic", elliptic_data, 100.0)


@pytest.fixture(scope="session")
def sirx_data():
    stream = np.random.default_rng(404)
    return make_data(
        "sirx", stream, theta=(1.0, 1.0), x_true=np.array([0.002, 0.3, 15.0]), level=5
    )


@pytest.fixture(scope="session")
def sirx_model(sirx_data):
    return make_model("sirx", sirx_data, (1.0, 1.0))
