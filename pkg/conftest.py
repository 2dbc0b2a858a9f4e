import os

# Settings are read at import time; pin them before anything imports config
os.environ.setdefault('CGDSGLD_ENV', 'testing')
os.environ['CGDSGLD_TASKS_EAGER'] = 'true'
os.environ['CGDSGLD_MANAGED'] = '1'

import numpy as np
import pytest

from celery_config import configure_eager
from models import Dataset, ModelKind, ModelSpec, build_model
from utils.dynamics import RandomStream
from utils.federation import Shard


@pytest.fixture(autouse=True)
def eager_tasks():
    configure_eager(True)
    yield


@pytest.fixture
def rng():
    return RandomStream(1234, 0)


@pytest.fixture
def gaussian_model():
    return build_model(ModelSpec(ModelKind.GAUSSIAN_MEAN, 2))


@pytest.fixture
def coin_model():
    return build_model(ModelSpec(ModelKind.BERNOULLI_COIN, 1))


@pytest.fixture
def linreg_model():
    return build_model(ModelSpec(ModelKind.BAYES_LIN_REG, 2, prior_precision=1.0, noise_scale=1.0))


@pytest.fixture
def coin_shards():
    """Three coins with 1, 5 and 9 ones out of ten."""
    shards = []
    for s, ones in enumerate((1, 5, 9)):
        shards.append(Shard(s, Dataset.from_targets([1.0] * ones + [0.0] * (10 - ones)), 1.0 / 3))
    return shards


@pytest.fixture
def gaussian_shards():
    """Three small two-dimensional Gaussian shards with distinct means."""
    generator = np.random.default_rng(7)
    means = np.array([[-2.0, 1.0], [0.5, 0.0], [3.0, -1.5]])
    return [Shard(s, Dataset(mean + generator.standard_normal((6, 2))), 1.0 / 3)
            for s, mean in enumerate(means)]


@pytest.fixture
def linreg_shards():
    generator = np.random.default_rng(11)
    beta = np.array([0.7, -1.2])
    shards = []
    for s in range(2):
        X = generator.standard_normal((5, 2)) + s
        y = X @ beta + generator.standard_normal(5)
        shards.append(Shard(s, Dataset(X, y), 0.5))
    return shards
