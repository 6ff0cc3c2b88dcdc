import numpy as np
import pytest

from chainfl.fl_task import generate_synthetic_classification, generate_synthetic_regression
from chainfl.model_math import HyperParams
from chainfl.store import MemoryStore


@pytest.fixture
def store():
    return MemoryStore(verify=True)


@pytest.fixture
def reg_task():
    return generate_synthetic_regression(3, n_devices=6, samples_per_device=20, dim=4, noise_sd=0.0,
                                         hp=HyperParams(0.05, 1, 10))


@pytest.fixture
def cls_task():
    return generate_synthetic_classification(5, n_devices=6, samples_per_device=30, dim=3, n_classes=3,
                                             separation=4.0, hp=HyperParams(0.1, 1, 10), scheme="IIDRandom")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
