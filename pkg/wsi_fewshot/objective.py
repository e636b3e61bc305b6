"""
Objective Module
Few-Shot Slide Classification Pipeline

Exact evaluators for the transductive objective
    total = f(U, W) + g(U) + lambda * h(U)
where f is the Gaussian data-fidelity term over all task samples, g the
entropic barrier on the query assignments and h the entropy of the query
class proportions. 0 * ln 0 is taken as 0 throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import xlogy

from .core import Proportions, as_rows
from .errors import DataFormatError


@dataclass(frozen=True)
class ObjectiveBreakdown:
    """The three objective terms, the penalty weight and their weighted total."""

    f_value: float
    g_value: float
    h_value: float
    lam: float

    @property
    def total(self):
        return self.f_value + self.g_value + self.lam * self.h_value

    def as_dict(self):
        return {"f": self.f_value, "g": self.g_value, "h": self.h_value,
                "lambda": self.lam, "total": self.total}


def stack_models(models, centroids=None):
    """Arrays (W, precisions, log_dets) from class models; ``centroids`` overrides W."""
    if centroids is None:
        centroids = np.stack([m.centroid for m in models])
    precisions = np.stack([m.precision for m in models])
    log_dets = np.array([m.log_det for m in models])
    return np.asarray(centroids, dtype=np.float64), precisions, log_dets


def squared_mahalanobis(features, centroids, precisions):
    """(w_k - z_n)' S_k (w_k - z_n) for every sample n and class k, shape (N, K)."""
    features = np.atleast_2d(features)
    if features.shape[1] != centroids.shape[1] or precisions.shape[1:] != (
        centroids.shape[1], centroids.shape[1]
    ):
        raise DataFormatError(
            f"dimension mismatch: features d={features.shape[1]}, "
            f"centroids d={centroids.shape[1]}, precisions {precisions.shape[1:]}"
        )
    diff = features[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,kde,nke->nk", diff, precisions, diff)


def data_fidelity(assignments, models, features, centroids=None):
    """Gaussian data-fidelity term f(U, W).

    Args:
        assignments: (N, K) assignments, rows aligned with ``features``
        models (list of ClassModel): precisions and log-determinants
        features (np.ndarray): (N, d) task samples, support and query
        centroids (np.ndarray, optional): W overriding the model centroids

    Returns:
        float
    """
    rows = as_rows(assignments)
    W, precisions, log_dets = stack_models(models, centroids)
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if rows.shape != (features.shape[0], len(models)):
        raise DataFormatError(
            f"assignments shape {rows.shape} does not match ({features.shape[0]}, {len(models)})"
        )
    maha = squared_mahalanobis(features, W, precisions)
    return 0.5 * float(np.sum(rows * (maha - log_dets[None, :])))


def entropic_barrier(assignments, query_rows):
    """g(U) = sum of u ln u over the query rows; always <= 0."""
    rows = as_rows(assignments)[query_rows]
    return float(np.sum(xlogy(rows, rows)))


def class_proportions(assignments, query_rows):
    """pi_k = mean of the query rows."""
    rows = as_rows(assignments)[query_rows]
    return rows.mean(axis=0)


def partition_entropy(assignments, query_rows):
    """h(U) = -sum pi ln pi of the query class proportions.

    Returns:
        tuple: (h, Proportions)
    """
    pi = class_proportions(assignments, query_rows)
    h = -float(np.sum(xlogy(pi, pi)))
    return max(h, 0.0), Proportions(pi / pi.sum())


def total_objective(assignments, models, task, lam, centroids=None):
    """Evaluate f + g + lambda * h for a task state."""
    features = task.sample_features()
    query_rows = task.query_rows
    f_value = data_fidelity(assignments, models, features, centroids)
    g_value = entropic_barrier(assignments, query_rows)
    h_value, _ = partition_entropy(assignments, query_rows)
    return ObjectiveBreakdown(f_value, g_value, h_value, float(lam))
