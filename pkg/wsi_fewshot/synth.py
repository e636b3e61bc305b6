"""
Synthetic Data Module
Few-Shot Slide Classification Pipeline

Deterministic generators for desk-scale experiments: Gaussian few-shot
tasks with controllable class covariances, homogeneous single-class
windows, and spatially coherent synthetic slides built from rectangular
single-class regions. All randomness flows from one explicit seed, and
features are rounded to 32-bit precision so generated data equals what the
feature file stores.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.stats import ortho_group

from .core import FeatureMatrix, FewShotTask, SupportSet, CLASS_PRIORS
from .errors import DataFormatError
from .windowing import SlideGrid

logger = logging.getLogger(__name__)

COVARIANCE_SPECS = ("identity", "diagonal", "spd")
EIGEN_RANGE = (0.1, 10.0)


def _as_float32(values):
    return np.asarray(values, dtype=np.float32).astype(np.float64)


def check_priors(priors):
    priors = np.asarray(priors, dtype=np.float64)
    if priors.ndim != 1 or priors.size < 1 or np.any(priors < 0) or abs(priors.sum() - 1.0) > 1e-9:
        raise DataFormatError(f"class priors must lie on the simplex, got {priors.tolist()}")
    return priors


def random_covariance(d, spec, rng, scale=1.0):
    """Covariance with condition number <= 100: identity, random diagonal or random SPD."""
    if spec not in COVARIANCE_SPECS:
        raise DataFormatError(f"unknown covariance spec {spec!r}")
    if spec == "identity":
        return scale * np.eye(d)
    low, high = np.log(EIGEN_RANGE[0]), np.log(EIGEN_RANGE[1])
    eigenvalues = np.exp(rng.uniform(low, high, size=d))
    if spec == "diagonal" or d == 1:
        return scale * np.diag(eigenvalues)
    basis = ortho_group.rvs(d, random_state=rng)
    cov = (basis * eigenvalues) @ basis.T
    return scale * 0.5 * (cov + cov.T)


@dataclass(frozen=True)
class ClassBank:
    """Per-class Gaussian distributions shared by every generated task or slide."""

    means: np.ndarray
    covariances: np.ndarray

    @property
    def n_classes(self):
        return self.means.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    def sample(self, classes, rng):
        """One 32-bit-rounded sample per entry of ``classes``."""
        classes = np.asarray(classes, dtype=np.int64)
        chol = np.linalg.cholesky(self.covariances)
        noise = rng.standard_normal((classes.size, self.dim))
        values = self.means[classes] + np.einsum("nij,nj->ni", chol[classes], noise)
        return _as_float32(values)

    def draw_support(self, shots, rng):
        """``shots`` samples per class, grouped by class."""
        classes = np.repeat(np.arange(self.n_classes), shots)
        return self.sample(classes, rng), classes


def make_class_bank(n_classes, dim, delta, cov_spec="identity", seed=0, scale=1.0):
    """Class means at delta times random orthonormal directions plus covariances.

    When K > d orthonormal directions do not exist and random unit directions
    are used instead.
    """
    if n_classes < 2 or dim < 1:
        raise DataFormatError(f"need K >= 2 and d >= 1, got K={n_classes}, d={dim}")
    rng = np.random.default_rng(seed)
    gaussian = rng.standard_normal((dim, n_classes))
    if n_classes <= dim:
        directions, _ = np.linalg.qr(gaussian)
    else:
        directions = gaussian / np.linalg.norm(gaussian, axis=0, keepdims=True)
    means = delta * directions.T
    covariances = np.stack([random_covariance(dim, cov_spec, rng, scale) for _ in range(n_classes)])
    return ClassBank(means=means, covariances=covariances)


@dataclass(frozen=True)
class SynthTask:
    task: FewShotTask
    query_truth: np.ndarray
    bank: ClassBank

    @property
    def features(self):
        return self.task.features


def gen_task(n_classes=5, dim=32, shots=5, queries=5, delta=3.0, cov_spec="identity",
             seed=0, scale=1.0):
    """Gaussian few-shot task with ``shots`` support and ``queries`` query samples per class.

    Support rows come first (grouped by class), then the shuffled queries.
    """
    if shots < 1 or queries < 1:
        raise DataFormatError(f"need shots >= 1 and queries >= 1, got {shots}, {queries}")
    bank = make_class_bank(n_classes, dim, delta, cov_spec, seed, scale)
    rng = np.random.default_rng([seed, 1])
    support_x, support_y = bank.draw_support(shots, rng)
    query_y = rng.permutation(np.repeat(np.arange(n_classes), queries))
    query_x = bank.sample(query_y, rng)
    features = FeatureMatrix(np.vstack([support_x, query_x]))
    n_support = support_y.size
    task = FewShotTask.from_classes(
        features,
        np.arange(n_support),
        support_y,
        np.arange(n_support, n_support + query_y.size),
        n_classes,
    )
    return SynthTask(task=task, query_truth=query_y, bank=bank)


def gen_window_tasks(bank, n_tasks, window_size=25, priors=None, support=None, shots=10, seed=0):
    """Homogeneous windows: every query of a task comes from one class drawn from the priors.

    Args:
        bank (ClassBank): Class distributions
        n_tasks (int): Number of windows
        window_size (int): Queries per window
        priors (array-like): Class priors, default the bank's uniform priors
        support (tuple, optional): (features, classes) support block shared by all tasks
        shots (int): Shots per class when ``support`` is not given
        seed (int): Random seed

    Returns:
        list of SynthTask
    """
    priors = check_priors(priors if priors is not None else np.full(bank.n_classes, 1.0 / bank.n_classes))
    rng = np.random.default_rng([seed, 2])
    if support is None:
        support = bank.draw_support(shots, rng)
    support_x, support_y = support
    tasks = []
    for _ in range(n_tasks):
        label = int(rng.choice(bank.n_classes, p=priors))
        query_y = np.full(window_size, label, dtype=np.int64)
        query_x = bank.sample(query_y, rng)
        features = FeatureMatrix(np.vstack([support_x, query_x]))
        task = FewShotTask.from_classes(
            features, np.arange(support_y.size), support_y,
            np.arange(support_y.size, support_y.size + window_size), bank.n_classes,
        )
        tasks.append(SynthTask(task=task, query_truth=query_y, bank=bank))
    return tasks


@dataclass(frozen=True)
class SynthSlide:
    grid: SlideGrid
    features: FeatureMatrix
    truth: np.ndarray
    support: SupportSet
    bank: ClassBank


def region_classes(n_rows, n_cols, block, priors, rng):
    """Class map made of block x block single-class regions with a random offset."""
    if block < 1:
        raise DataFormatError(f"block size must be >= 1, got {block}")
    priors = check_priors(priors)
    offset_r, offset_c = rng.integers(0, block, size=2)
    block_r = (np.arange(n_rows) + offset_r) // block
    block_c = (np.arange(n_cols) + offset_c) // block
    n_blocks = (int(block_r[-1]) + 1, int(block_c[-1]) + 1)
    block_class = rng.choice(priors.size, size=n_blocks, p=priors)
    return block_class[np.ix_(block_r, block_c)]


def gen_slide(n_rows, n_cols, block=5, priors=CLASS_PRIORS, dim=32, delta=3.0,
              cov_spec="spd", shots=10, seed=0, bank=None, support=None, scale=1.0):
    """Spatially coherent synthetic slide.

    Feature rows: the support block first, then one row per cell in row-major
    order. ``bank`` and ``support`` let several slides share class
    distributions and a support set.
    """
    if n_rows < 1 or n_cols < 1:
        raise DataFormatError(f"grid must be non-empty, got {n_rows} x {n_cols}")
    priors = check_priors(priors)
    if bank is None:
        bank = make_class_bank(priors.size, dim, delta, cov_spec, seed, scale)
    if bank.n_classes != priors.size:
        raise DataFormatError(f"{priors.size} priors for a {bank.n_classes}-class bank")
    rng = np.random.default_rng([seed, 3])
    if support is None:
        support = bank.draw_support(shots, rng)
    support_x, support_y = support

    truth = region_classes(n_rows, n_cols, block, priors, rng)
    cell_x = bank.sample(truth.ravel(), rng)
    features = FeatureMatrix(np.vstack([support_x, cell_x]))

    rr, cc = np.meshgrid(np.arange(n_rows), np.arange(n_cols), indexing="ij")
    grid = SlideGrid(
        n_rows=n_rows,
        n_cols=n_cols,
        rows=rr.ravel(),
        cols=cc.ravel(),
        feature_index=support_y.size + np.arange(n_rows * n_cols),
        true_class=truth.ravel(),
        n_classes=bank.n_classes,
    )
    support_set = SupportSet.from_classes(features, np.arange(support_y.size), support_y, bank.n_classes)
    logger.debug("slide %dx%d, block %d, class counts %s", n_rows, n_cols, block,
                  np.bincount(truth.ravel(), minlength=bank.n_classes).tolist())
    return SynthSlide(grid=grid, features=features, truth=truth, support=support_set, bank=bank)