import os

import numpy as np
import pytest

from elimpute.dataset import Dataset


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: Monte Carlo checks, run with EL_MISSING_SLOW=1")


def pytest_collection_modifyitems(config, items):
    if os.getenv("EL_MISSING_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set EL_MISSING_SLOW=1 to run slow tests")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def mar_data():
    """n=120 sample, y = 1 + 2x + noise, y missing more often for large x"""
    rng = np.random.default_rng(7)
    n = 120
    x = rng.normal(size=n)
    y = 1.0 + 2.0 * x + rng.normal(scale=0.5, size=n)
    observed = rng.random(n) < 1.0 / (1.0 + np.exp(-(1.0 - x)))
    observed[:5] = True
    y = np.where(observed, y, np.nan)
    return Dataset.from_arrays(x[:, None], y)


@pytest.fixture
def complete_data():
    rng = np.random.default_rng(11)
    n = 80
    x = rng.normal(size=n)
    y = 0.5 * x + rng.normal(size=n)
    return Dataset.from_arrays(x[:, None], y)


@pytest.fixture
def tiny_data():
    """Six rows, the last two missing"""
    x = np.array([[0.0], [1.0], [2.0], [3.0], [0.5], [2.5]])
    y = np.array([1.0, 2.0, 3.0, 4.0, np.nan, np.nan])
    return Dataset.from_arrays(x, y)
