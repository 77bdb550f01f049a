import numpy as np
import pytest

import mhekit as mk


@pytest.fixture(scope="session")
def reactor():
    return mk.batch_reactor_model()


@pytest.fixture(scope="session")
def reactor_observer():
    return mk.batch_reactor_observer()


@pytest.fixture(scope="session")
def quad_cost():
    # The case-study weights: inverse noise covariances, identity prior.
    return mk.quadratic_cost(100.0 * np.eye(2), np.array([[25.0]]))


@pytest.fixture(scope="session")
def short_run():
    return mk.run_experiment(mk.ExperimentConfig(seed=11, steps=40))
