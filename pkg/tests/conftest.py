"""Shared fixtures for the few-shot pipeline tests."""

import numpy as np
import pytest

from wsi_fewshot.core import ClassModel, FeatureMatrix, FewShotTask
from wsi_fewshot.synth import gen_task


def random_spd(dim, rng, low=0.2, high=5.0):
    basis, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    eigenvalues = rng.uniform(low, high, size=dim)
    matrix = (basis * eigenvalues) @ basis.T
    return 0.5 * (matrix + matrix.T)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def make_spd():
    return random_spd


@pytest.fixture
def small_task():
    """K=3, d=4 Gaussian task with 4 shots and 6 queries per class."""
    return gen_task(n_classes=3, dim=4, shots=4, queries=6, delta=3.0, seed=7)


@pytest.fixture
def make_random_state():
    """Factory: random task, random SPD class models, random simplex assignments."""

    def factory(seed, n_classes=5, dim=8, shots=3, n_query=20):
        rng = np.random.default_rng(seed)
        n_support = n_classes * shots
        features = FeatureMatrix(rng.standard_normal((n_support + n_query, dim)) * 2.0)
        task = FewShotTask.from_classes(
            features,
            np.arange(n_support),
            np.repeat(np.arange(n_classes), shots),
            np.arange(n_support, n_support + n_query),
            n_classes,
        )
        models = [
            ClassModel.from_precision(rng.standard_normal(dim), random_spd(dim, rng))
            for _ in range(n_classes)
        ]
        rows = np.empty((task.n_samples, n_classes))
        rows[:n_support] = task.support_labels
        rows[n_support:] = rng.dirichlet(np.ones(n_classes), size=n_query)
        return task, models, rows

    return factory
