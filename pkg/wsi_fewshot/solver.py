"""
Transductive Solver Module
Few-Shot Slide Classification Pipeline

This module implements the PADDLE-Cov alternating minimization: each
iteration recomputes the query assignments as a softmax of Gaussian logits
plus a proportion prior, then the class centroids as assignment-weighted
means over all task samples, then the query class proportions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import softmax

from .core import AssignmentMatrix, Proportions
from .errors import DataFormatError, NumericalError
from .objective import squared_mahalanobis, stack_models, total_objective
from .precision import identity_models, support_means

logger = logging.getLogger(__name__)

PRECISION_MODES = ("glasso", "identity")


@dataclass(frozen=True)
class SolverConfig:
    """Solver settings.

    ``lam`` weighs the partition-complexity penalty. ``precision_mode``
    "identity" replaces every class precision with the identity.
    ``update_centroids=False`` freezes W at the support means.
    """

    lam: float = 1250.0
    max_iters: int = 100
    rel_tol: float = 1e-6
    precision_mode: str = "glasso"
    pi_floor: float = 1e-12
    update_centroids: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise DataFormatError(f"lambda must be >= 0, got {self.lam}")
        if self.max_iters < 1:
            raise DataFormatError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.rel_tol <= 0:
            raise DataFormatError(f"rel_tol must be > 0, got {self.rel_tol}")
        if self.precision_mode not in PRECISION_MODES:
            raise DataFormatError(f"unknown precision mode {self.precision_mode!r}")


@dataclass
class SolveResult:
    """Final state of a solve plus the objective trace (initial state included)."""

    assignments: AssignmentMatrix
    centroids: np.ndarray
    proportions: Proportions
    objective_trace: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    n_support: int = 0

    @property
    def query_posteriors(self):
        return self.assignments.rows[self.n_support:]

    def predictions(self):
        """Hard query labels, lowest class id on ties."""
        return np.argmax(self.query_posteriors, axis=1)


def floored_log_proportions(pi, pi_floor=1e-12):
    """ln pi after flooring at ``pi_floor`` and renormalizing."""
    pi = np.maximum(np.asarray(pi, dtype=np.float64), pi_floor)
    return np.log(pi / pi.sum())


def softmax_rows(logits):
    """Row-wise softmax; raises on any non-finite logit."""
    logits = np.asarray(logits, dtype=np.float64)
    bad = np.argwhere(~np.isfinite(logits))
    if bad.size:
        n, k = (int(v) for v in bad[0])
        raise NumericalError(f"non-finite logit at sample {n}, class {k}", position=(n, k))
    return softmax(logits, axis=1)


def gaussian_logits(features, centroids, precisions, log_dets):
    """-1/2 Mahalanobis + 1/2 ln det per sample and class."""
    maha = squared_mahalanobis(features, centroids, precisions)
    return -0.5 * maha + 0.5 * log_dets[None, :]


def assignment_update(features, centroids, models, pi, lam, n_query, pi_floor=1e-12):
    """Closed-form query assignment step.

    Args:
        features (np.ndarray): (|Q|, d) query features
        centroids (np.ndarray): (K, d) current W
        models (list of ClassModel): precisions and log-determinants
        pi (array-like or Proportions): current class proportions
        lam (float): partition-complexity weight
        n_query (int): |Q|

    Returns:
        np.ndarray: (|Q|, K) rows on the simplex
    """
    pi = pi.pi if isinstance(pi, Proportions) else pi
    _, precisions, log_dets = stack_models(models, centroids)
    logits = gaussian_logits(features, np.asarray(centroids), precisions, log_dets)
    if lam:
        logits = logits + (lam / n_query) * floored_log_proportions(pi, pi_floor)[None, :]
    return softmax_rows(logits)


def centroid_update(features, assignments):
    """Assignment-weighted mean of all samples per class, shape (K, d)."""
    rows = np.asarray(getattr(assignments, "rows", assignments), dtype=np.float64)
    weights = rows.sum(axis=0)
    if np.any(weights <= 0):
        k = int(np.flatnonzero(weights <= 0)[0])
        raise NumericalError(f"class {k} has zero total assignment weight")
    return (rows.T @ features) / weights[:, None]


def proportion_update(assignments, query_rows):
    """pi_k = mean over query rows of u_{n,k}."""
    rows = np.asarray(getattr(assignments, "rows", assignments), dtype=np.float64)
    pi = rows[query_rows].mean(axis=0)
    return Proportions(pi / pi.sum())


def initialize(task, models):
    """Initial state: W = support means, prior-free Gaussian softmax for the queries.

    Returns:
        tuple: (U0 as (N, K) array, W0, pi0)
    """
    centroids = support_means(task)
    _, precisions, log_dets = stack_models(models, centroids)
    query_features = task.features.rows(task.query_indices)
    rows = np.empty((task.n_samples, task.n_classes))
    rows[: task.n_support] = task.support_labels
    rows[task.n_support:] = softmax_rows(
        gaussian_logits(query_features, centroids, precisions, log_dets)
    )
    return rows, centroids, proportion_update(rows, task.query_rows)


def relative_change(previous, current):
    """|previous - current| / max(|previous|, 1)."""
    return abs(previous - current) / max(abs(previous), 1.0)


def solve(task, models, cfg=None):
    """Run the alternating minimization on one task.

    Stops once the relative total-objective change drops below ``rel_tol``,
    or after ``max_iters``.
    Non-convergence is reported through ``converged=False``.
    """
    cfg = cfg or SolverConfig()
    if len(models) != task.n_classes:
        raise DataFormatError(f"{len(models)} class models for a {task.n_classes}-class task")
    if cfg.precision_mode == "identity":
        models = identity_models([m.centroid for m in models])

    features = task.sample_features()
    query_rows = task.query_rows
    query_features = features[query_rows]
    n_query = task.n_query

    rows, centroids, proportions = initialize(task, models)
    trace = [total_objective(rows, models, task, cfg.lam, centroids)]
    converged = False
    iteration = 0
    for iteration in range(1, cfg.max_iters + 1):
        previous_rows = rows[query_rows].copy()
        rows[query_rows] = assignment_update(
            query_features, centroids, models, proportions, cfg.lam, n_query, cfg.pi_floor
        )
        if cfg.update_centroids:
            centroids = centroid_update(features, rows)
        proportions = proportion_update(rows, query_rows)

        breakdown = total_objective(rows, models, task, cfg.lam, centroids)
        trace.append(breakdown)
        row_change = float(np.max(np.abs(rows[query_rows] - previous_rows)))
        logger.debug("iter %3d  f=%.6f g=%.6f h=%.6f total=%.6f  max du=%.2e",
                     iteration, breakdown.f_value, breakdown.g_value, breakdown.h_value,
                     breakdown.total, row_change)
        if relative_change(trace[-2].total, breakdown.total) < cfg.rel_tol:
            converged = True
            break

    if not converged:
        logger.debug("solver stopped after %d iterations without converging", iteration)
    return SolveResult(
        assignments=AssignmentMatrix(rows),
        centroids=centroids,
        proportions=proportions,
        objective_trace=trace,
        iterations=iteration,
        converged=converged,
        n_support=task.n_support,
    )
