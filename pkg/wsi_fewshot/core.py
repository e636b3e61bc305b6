"""
Core Types Module
Few-Shot Slide Classification Pipeline

This module defines the domain types shared by every stage of the pipeline:
feature matrices, few-shot tasks, soft assignments, per-class Gaussian models
and class proportions, plus the task validation report.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import DataFormatError, NumericalError

logger = logging.getLogger(__name__)

# Canonical class order: NT=0, RE=1, AM=2, VE=3, AN=4
CLASS_NAMES = ("NT", "RE", "AM", "VE", "AN")
CLASS_PRIORS = (0.26, 0.14, 0.08, 0.12, 0.40)
UNLABELED = -1

SIMPLEX_TOL = 1e-9


def _frozen(array, dtype=np.float64):
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class FeatureMatrix:
    """N x d table of sample embeddings, one row per sample."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise DataFormatError(f"feature matrix must be 2-D, got {values.ndim}-D")
        if values.shape[0] < 1 or values.shape[1] < 1:
            raise DataFormatError(f"feature matrix must be non-empty, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            bad = int(np.flatnonzero(~np.isfinite(values.ravel()))[0])
            raise DataFormatError(f"non-finite feature value at sample {bad // values.shape[1]}")
        object.__setattr__(self, "values", _frozen(values))

    @property
    def n_samples(self):
        return self.values.shape[0]

    @property
    def dim(self):
        return self.values.shape[1]

    def rows(self, indices):
        """Return the feature rows at ``indices`` as a fresh array."""
        return self.values[np.asarray(indices, dtype=np.int64)]


def one_hot(classes, n_classes):
    """Encode integer class ids as a one-hot matrix."""
    classes = np.asarray(classes, dtype=np.int64)
    out = np.zeros((classes.size, n_classes), dtype=np.float64)
    out[np.arange(classes.size), classes] = 1.0
    return out


@dataclass(frozen=True)
class SupportSet:
    """Labelled support block shared by every task built over one feature matrix."""

    features: FeatureMatrix
    indices: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        object.__setattr__(self, "indices", _frozen(self.indices, np.int64))
        object.__setattr__(self, "labels", _frozen(self.labels))

    @classmethod
    def from_classes(cls, features, indices, classes, n_classes):
        return cls(features, np.asarray(indices), one_hot(classes, n_classes), int(n_classes))

    @property
    def classes(self):
        return np.argmax(self.labels, axis=1)

    def task_for(self, query_indices):
        """Build the few-shot task whose query set is ``query_indices``."""
        return FewShotTask(
            features=self.features,
            support_indices=self.indices,
            support_labels=self.labels,
            query_indices=np.asarray(query_indices, dtype=np.int64),
            n_classes=self.n_classes,
        )


@dataclass(frozen=True)
class FewShotTask:
    """Disjoint support and query index sets over a feature matrix.

    Assignment matrices built for a task hold one row per task sample, support
    samples first (in ``support_indices`` order) then query samples.
    """

    features: FeatureMatrix
    support_indices: np.ndarray
    support_labels: np.ndarray
    query_indices: np.ndarray
    n_classes: int

    def __post_init__(self):
        object.__setattr__(self, "support_indices", _frozen(self.support_indices, np.int64))
        object.__setattr__(self, "support_labels", _frozen(np.atleast_2d(self.support_labels)))
        object.__setattr__(self, "query_indices", _frozen(self.query_indices, np.int64))

    @classmethod
    def from_classes(cls, features, support_indices, support_classes, query_indices, n_classes):
        return cls(
            features=features,
            support_indices=np.asarray(support_indices),
            support_labels=one_hot(support_classes, n_classes),
            query_indices=np.asarray(query_indices),
            n_classes=int(n_classes),
        )

    @property
    def n_support(self):
        return self.support_indices.size

    @property
    def n_query(self):
        return self.query_indices.size

    @property
    def n_samples(self):
        return self.n_support + self.n_query

    @property
    def support_classes(self):
        return np.argmax(self.support_labels, axis=1)

    @property
    def query_rows(self):
        """Positions of the query samples inside a task assignment matrix."""
        return np.arange(self.n_support, self.n_samples)

    @property
    def sample_indices(self):
        return np.concatenate([self.support_indices, self.query_indices])

    def sample_features(self):
        """Feature rows of the task samples, support first then query."""
        return self.features.rows(self.sample_indices)

    def shots_per_class(self):
        return np.bincount(self.support_classes, minlength=self.n_classes)

    def support(self):
        return SupportSet(self.features, self.support_indices, self.support_labels, self.n_classes)


@dataclass(frozen=True)
class AssignmentMatrix:
    """Soft assignments U: one simplex row per task sample."""

    rows: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rows", _frozen(self.rows))

    @property
    def n_classes(self):
        return self.rows.shape[1]

    def argmax(self):
        # np.argmax returns the first maximum, i.e. the lowest class id on ties
        return np.argmax(self.rows, axis=1)

    def violations(self, task, tol=SIMPLEX_TOL):
        """List the simplex and support-clamping violations against ``task``."""
        problems = []
        rows = self.rows
        if rows.shape != (task.n_samples, task.n_classes):
            return [f"shape {rows.shape} does not match task ({task.n_samples}, {task.n_classes})"]
        negative = np.flatnonzero((rows < 0).any(axis=1))
        problems.extend(f"row {i} has a negative entry" for i in negative)
        off = np.flatnonzero(np.abs(rows.sum(axis=1) - 1.0) > tol)
        problems.extend(f"row {i} does not sum to 1" for i in off)
        clamped = rows[: task.n_support] != task.support_labels
        problems.extend(
            f"support row {i} differs from its label" for i in np.flatnonzero(clamped.any(axis=1))
        )
        return problems


def as_rows(assignments):
    """Accept an AssignmentMatrix or a raw array and return the array."""
    if isinstance(assignments, AssignmentMatrix):
        return assignments.rows
    return np.asarray(assignments, dtype=np.float64)


def cholesky_log_det(matrix):
    """Log-determinant of a symmetric positive-definite matrix via Cholesky."""
    try:
        chol = linalg.cholesky(matrix, lower=True)
    except linalg.LinAlgError as exc:
        raise NumericalError(f"Cholesky factorization failed: {exc}") from exc
    return 2.0 * float(np.sum(np.log(np.diag(chol))))


@dataclass(frozen=True)
class ClassModel:
    """Gaussian class model: centroid, precision matrix and its log-determinant."""

    centroid: np.ndarray
    precision: np.ndarray
    log_det: float

    def __post_init__(self):
        centroid = np.asarray(self.centroid, dtype=np.float64).ravel()
        precision = np.atleast_2d(np.asarray(self.precision, dtype=np.float64))
        if precision.shape != (centroid.size, centroid.size):
            raise DataFormatError(
                f"precision shape {precision.shape} does not match centroid dim {centroid.size}"
            )
        if not np.allclose(precision, precision.T, rtol=0.0, atol=1e-10):
            raise NumericalError("precision matrix is not symmetric")
        expected = cholesky_log_det(precision)
        if abs(expected - float(self.log_det)) > 1e-8:
            raise NumericalError(
                f"cached log_det {self.log_det!r} disagrees with Cholesky value {expected!r}"
            )
        object.__setattr__(self, "centroid", _frozen(centroid))
        object.__setattr__(self, "precision", _frozen(precision))
        object.__setattr__(self, "log_det", float(self.log_det))

    @classmethod
    def from_precision(cls, centroid, precision):
        precision = np.asarray(precision, dtype=np.float64)
        precision = 0.5 * (precision + precision.T)
        return cls(centroid, precision, cholesky_log_det(precision))

    @classmethod
    def identity(cls, centroid):
        centroid = np.asarray(centroid, dtype=np.float64).ravel()
        return cls(centroid, np.eye(centroid.size), 0.0)

    @property
    def dim(self):
        return self.centroid.size


@dataclass(frozen=True)
class Proportions:
    """Class proportions pi over the query set."""

    pi: np.ndarray

    def __post_init__(self):
        pi = _frozen(np.asarray(self.pi, dtype=np.float64).ravel())
        if np.any(pi < 0) or abs(pi.sum() - 1.0) > SIMPLEX_TOL:
            raise NumericalError(f"proportions are not on the simplex: {pi}")
        object.__setattr__(self, "pi", pi)


@dataclass
class ValidationReport:
    """Outcome of validate_task: empty ``violations`` means the task passes."""

    violations: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.violations

    def __bool__(self):
        return self.ok

    def raise_if_failed(self):
        if self.violations:
            raise DataFormatError("invalid task: " + "; ".join(self.violations))


def validate_task(task):
    """Check every FewShotTask invariant and report the violated ones.

    Args:
        task (FewShotTask): Task to check

    Returns:
        ValidationReport: ``ok`` when the task satisfies all invariants
    """
    report = ValidationReport()
    n = task.features.n_samples
    support = task.support_indices
    query = task.query_indices
    labels = task.support_labels

    if query.size < 1:
        report.violations.append("query set is empty")

    for name, indices in (("support", support), ("query", query)):
        outside = indices[(indices < 0) | (indices >= n)]
        report.violations.extend(f"{name} index {i} out of range" for i in outside)
        values, counts = np.unique(indices, return_counts=True)
        report.violations.extend(f"{name} index {i} repeated" for i in values[counts > 1])

    for index in np.intersect1d(support, query):
        report.violations.append(f"overlap at index {index}")

    if labels.shape != (support.size, task.n_classes):
        report.violations.append(
            f"support labels shape {labels.shape} != ({support.size}, {task.n_classes})"
        )
        return report

    one_hot_rows = np.all((labels == 0) | (labels == 1), axis=1) & (labels.sum(axis=1) == 1)
    report.violations.extend(
        f"support label row {i} is not one-hot" for i in np.flatnonzero(~one_hot_rows)
    )

    shots = labels[one_hot_rows].sum(axis=0)
    report.violations.extend(
        f"class {k} has no shots" for k in np.flatnonzero(shots < 1)
    )

    if report.violations:
        logger.debug("task failed validation: %s", report.violations)
    return report
