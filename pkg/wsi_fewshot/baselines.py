"""
Inductive Baselines Module
Few-Shot Slide Classification Pipeline

SimpleShot nearest-centroid classifier with its three feature transforms:
UN (unnormalized), L2N (row-wise L2 normalization) and CL2N (centering on
the support mean, then L2 normalization). Each query is classified from the
support set alone.
"""

from __future__ import annotations

import numpy as np
from sklearn.neighbors import NearestCentroid
from sklearn.preprocessing import normalize

from .core import one_hot
from .errors import DataFormatError

SIMPLESHOT_VARIANTS = ("UN", "L2N", "CL2N")


def transform_features(support, query, variant):
    """Apply a SimpleShot transform; zero vectors are left unnormalized."""
    if variant not in SIMPLESHOT_VARIANTS:
        raise DataFormatError(f"unknown SimpleShot variant {variant!r}")
    if variant == "UN":
        return support, query
    if variant == "CL2N":
        center = support.mean(axis=0)
        support, query = support - center, query - center
    return normalize(support, norm="l2"), normalize(query, norm="l2")


def simpleshot(task, variant="CL2N"):
    """Nearest support-class centroid in Euclidean distance.

    Args:
        task (FewShotTask): Support and query sets
        variant (str): "UN", "L2N" or "CL2N"

    Returns:
        np.ndarray: hard query predictions, lowest class id on ties
    """
    support = task.features.rows(task.support_indices)
    query = task.features.rows(task.query_indices)
    support, query = transform_features(support, query, variant)
    if task.n_classes == 1:
        return np.zeros(task.n_query, dtype=np.int64)
    classifier = NearestCentroid(metric="euclidean")
    try:
        classifier.fit(support, task.support_classes)
    except ValueError as exc:
        raise DataFormatError(f"SimpleShot cannot fit the support set: {exc}") from exc
    if not np.array_equal(classifier.classes_, np.arange(task.n_classes)):
        raise DataFormatError("every class needs at least one support sample")
    return classifier.predict(query).astype(np.int64)


def simpleshot_posteriors(task, variant="CL2N"):
    """One-hot posteriors so SimpleShot output shares the solver's CSV shape."""
    return one_hot(simpleshot(task, variant), task.n_classes)
