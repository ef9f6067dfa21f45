import numpy as np
import pytest

from holstein_rnn.datagen import QuenchProtocol, compute_scaling_coefficients, generate_dataset


@pytest.fixture(scope="session")
def shallow_small():
    p = QuenchProtocol.shallow(n_trajectories=4, n_prediction_steps=40, test_fraction=0.25)
    return generate_dataset(p)


@pytest.fixture(scope="session")
def deep_small():
    p = QuenchProtocol.deep(n_trajectories=4, n_prediction_steps=24, transient_skip=8.0, test_fraction=0.25)
    return generate_dataset(p)


@pytest.fixture(scope="session")
def shallow_scaling(shallow_small):
    return compute_scaling_coefficients(shallow_small.subset("train"), shallow_small.params)


@pytest.fixture(scope="session")
def deep_scaling(deep_small):
    return compute_scaling_coefficients(deep_small.subset("train"), deep_small.params)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
