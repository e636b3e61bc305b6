"""
Precision Estimation Module
Few-Shot Slide Classification Pipeline

This module estimates per-class sparse precision matrices from support
samples with the Graphical Lasso (block coordinate descent over columns,
each column an l1-penalized regression solved by cyclic coordinate descent),
and provides positive-definite matrix utilities.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
from joblib import Parallel, delayed
from scipy import linalg
from sklearn.covariance import empirical_covariance as _sk_empirical_covariance

from .core import ClassModel, cholesky_log_det
from .errors import DataFormatError, NumericalError

logger = logging.getLogger(__name__)

DEFAULT_RHO_SCALE = 0.1


@dataclass(frozen=True)
class GlassoConfig:
    """Graphical Lasso settings.

    ``rho=None`` selects the scale-relative default 0.1 * mean(diag(S)).
    Sweeps run until the covariance estimate moves less than ``polish_tol``
    or the sweep budget is spent; the fit counts as converged when the last
    change is below ``kkt_tol``.
    """

    rho: float | None = None
    max_sweeps: int = 200
    kkt_tol: float = 1e-4
    jitter: float = 1e-6
    polish_tol: float = 1e-12
    max_inner: int = 1000

    def __post_init__(self):
        if self.rho is not None and self.rho < 0:
            raise DataFormatError(f"rho must be >= 0, got {self.rho}")
        if self.kkt_tol <= 0:
            raise DataFormatError(f"kkt_tol must be > 0, got {self.kkt_tol}")
        if self.jitter < 0:
            raise DataFormatError(f"jitter must be >= 0, got {self.jitter}")
        if self.max_sweeps < 1:
            raise DataFormatError(f"max_sweeps must be >= 1, got {self.max_sweeps}")

    def resolve_rho(self, covariance):
        if self.rho is not None:
            return float(self.rho)
        return DEFAULT_RHO_SCALE * float(np.mean(np.diag(covariance)))


def empirical_covariance(samples):
    """Maximum-likelihood covariance (divide by m) around the sample mean."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    cov = np.atleast_2d(_sk_empirical_covariance(samples, assume_centered=False))
    return 0.5 * (cov + cov.T)


def log_det_pd(matrix):
    """2 * sum(log(diag(L))) for the Cholesky factor L of a symmetric PD matrix."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    if not np.allclose(matrix, matrix.T, rtol=0.0, atol=1e-10):
        raise DataFormatError("log_det_pd: matrix is not symmetric")
    return cholesky_log_det(matrix)


def is_positive_definite(matrix):
    try:
        linalg.cholesky(matrix, lower=True)
    except linalg.LinAlgError:
        return False
    return True


def _pd_inverse(matrix):
    factor = linalg.cho_factor(matrix, lower=True)
    inverse = linalg.cho_solve(factor, np.eye(matrix.shape[0]))
    return 0.5 * (inverse + inverse.T)


def _soft_threshold(value, threshold):
    if value > threshold:
        return value - threshold
    if value < -threshold:
        return value + threshold
    return 0.0


def _lasso_cd(gram, target, rho, beta, max_inner, tol):
    """Minimize 0.5 b'Vb - s'b + rho |b|_1 by cyclic coordinate descent (warm start)."""
    diag = np.diag(gram).tolist()
    target = target.tolist()
    fitted = gram @ beta
    for _ in range(max_inner):
        largest = 0.0
        for i in range(beta.size):
            old = float(beta[i])
            partial = target[i] - float(fitted[i]) + diag[i] * old
            new = _soft_threshold(partial, rho) / diag[i]
            if new != old:
                fitted += gram[:, i] * (new - old)
                beta[i] = new
                largest = max(largest, abs(new - old))
        if largest <= tol:
            break
    return beta


def kkt_residual(emp_cov, precision, cov_estimate, rho, zero_tol=0.0):
    """Largest off-diagonal violation of the Graphical Lasso optimality conditions.

    Where the precision entry is zero, |S_ij - W_ij| must not exceed rho;
    elsewhere W_ij - S_ij must equal rho * sign(Theta_ij).
    """
    gap = cov_estimate - emp_cov
    off = ~np.eye(emp_cov.shape[0], dtype=bool)
    zero = np.abs(precision) <= zero_tol
    slack = np.where(zero, np.maximum(np.abs(gap) - rho, 0.0),
                     np.abs(gap - rho * np.sign(precision)))
    return float(slack[off].max()) if off.any() else 0.0


def _precision_from_betas(covariance, betas):
    d = covariance.shape[0]
    precision = np.zeros((d, d))
    for j in range(d):
        rest = np.arange(d) != j
        diag = 1.0 / (covariance[j, j] - covariance[rest, j] @ betas[j])
        precision[j, j] = diag
        precision[rest, j] = -diag * betas[j]
    return 0.5 * (precision + precision.T)


def graphical_lasso(emp_cov, cfg=None):
    """l1-penalized Gaussian precision estimate.

    Args:
        emp_cov (np.ndarray): Symmetric PSD covariance S
        cfg (GlassoConfig): Penalty and convergence settings

    Returns:
        tuple: (precision, cov_estimate); cov_estimate has diagonal S_ii + rho
            and precision is its inverse

    Raises:
        DataFormatError: S not square or not symmetric
        NumericalError: rho = 0 on a singular S even after jitter, or the
            sweeps did not reach kkt_tol within max_sweeps
    """
    cfg = cfg or GlassoConfig()
    emp_cov = np.atleast_2d(np.asarray(emp_cov, dtype=np.float64))
    if emp_cov.ndim != 2 or emp_cov.shape[0] != emp_cov.shape[1]:
        raise DataFormatError(f"covariance must be square, got shape {emp_cov.shape}")
    if not np.allclose(emp_cov, emp_cov.T, rtol=0.0, atol=1e-10):
        raise DataFormatError("covariance matrix is not symmetric")
    emp_cov = 0.5 * (emp_cov + emp_cov.T)
    d = emp_cov.shape[0]
    rho = cfg.resolve_rho(emp_cov)

    if rho == 0.0:
        covariance = emp_cov
        if not is_positive_definite(covariance):
            logger.warning("⚠️ Singular covariance with rho = 0, adding jitter %.1e", cfg.jitter)
            covariance = emp_cov + cfg.jitter * np.eye(d)
            if not is_positive_definite(covariance):
                raise NumericalError("covariance is not positive-definite and rho = 0")
        return _pd_inverse(covariance), covariance

    covariance = emp_cov + rho * np.eye(d)
    if d == 1:
        return np.array([[1.0 / covariance[0, 0]]]), covariance

    betas = np.zeros((d, d - 1))
    delta = np.inf
    for sweep in range(cfg.max_sweeps):
        previous = covariance.copy()
        for j in range(d):
            rest = np.arange(d) != j
            gram = covariance[np.ix_(rest, rest)]
            betas[j] = _lasso_cd(gram, emp_cov[rest, j], rho, betas[j],
                                 cfg.max_inner, cfg.polish_tol)
            column = gram @ betas[j]
            covariance[rest, j] = column
            covariance[j, rest] = column
        delta = float(np.max(np.abs(covariance - previous)))
        if logger.isEnabledFor(logging.DEBUG):
            residual = kkt_residual(emp_cov, _precision_from_betas(covariance, betas),
                                    covariance, rho, zero_tol=1e-12)
            logger.debug("[graphical_lasso] sweep %3d, KKT residual %.3e, max change %.3e",
                         sweep, residual, delta)
        if delta < cfg.polish_tol:
            break

    if delta >= cfg.kkt_tol:
        raise NumericalError(
            f"Graphical Lasso did not converge in {cfg.max_sweeps} sweeps "
            f"(last change {delta:.3e})",
            residual=delta,
        )

    precision = _precision_from_betas(covariance, betas)

    if not is_positive_definite(precision):
        raise NumericalError("Graphical Lasso produced a non positive-definite precision",
                             residual=delta)
    return precision, covariance


def identity_models(centroids):
    """Class models with identity precision (log_det 0) at the given centroids."""
    return [ClassModel.identity(c) for c in np.atleast_2d(centroids)]


def support_means(task):
    """Per-class mean of the support features, shape (K, d)."""
    features = task.features.rows(task.support_indices)
    labels = task.support_labels
    return (labels.T @ features) / labels.sum(axis=0)[:, None]


def _fit_one(class_id, samples, cfg):
    centroid = samples.mean(axis=0)
    if samples.shape[0] < 2:
        logger.warning("⚠️ Class %d has %d shot(s), using identity precision",
                       class_id, samples.shape[0])
        return ClassModel.identity(centroid), 0.0
    emp_cov = empirical_covariance(samples)
    class_cfg = replace(cfg, rho=cfg.resolve_rho(emp_cov))
    try:
        precision, _ = graphical_lasso(emp_cov, class_cfg)
        model = ClassModel.from_precision(centroid, precision)
    except NumericalError as exc:
        raise NumericalError(str(exc), residual=exc.residual, class_id=class_id) from exc
    logger.debug("class %d: %d shots, rho %.4g, log_det %.4f",
                 class_id, samples.shape[0], class_cfg.rho, model.log_det)
    return model, class_cfg.rho


def fit_class_models(task, cfg=None, precision_mode="glasso", n_jobs=1):
    """Fit one Gaussian class model per class from the support set.

    Args:
        task (FewShotTask or SupportSet): Source of the labelled support samples
        cfg (GlassoConfig): Graphical Lasso settings
        precision_mode (str): "glasso" or "identity"
        n_jobs (int): Worker threads for the per-class fits

    Returns:
        tuple: (list of K ClassModel, list of the rho used per class)
    """
    cfg = cfg or GlassoConfig()
    if precision_mode not in ("glasso", "identity"):
        raise DataFormatError(f"unknown precision mode {precision_mode!r}")
    if hasattr(task, "support_indices"):
        indices, labels = task.support_indices, task.support_labels
    else:
        indices, labels = task.indices, task.labels
    features = task.features.rows(indices)
    classes = np.argmax(labels, axis=1)
    n_classes = labels.shape[1]
    per_class = [features[classes == k] for k in range(n_classes)]
    empty = [k for k, samples in enumerate(per_class) if samples.shape[0] == 0]
    if empty:
        raise DataFormatError(f"class {empty[0]} has no shots")

    if precision_mode == "identity":
        return identity_models([s.mean(axis=0) for s in per_class]), [0.0] * n_classes

    fitted = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(_fit_one)(k, samples, cfg) for k, samples in enumerate(per_class)
    )
    models = [model for model, _ in fitted]
    rhos = [rho for _, rho in fitted]
    logger.info("✅ Fitted %d class models (d=%d)", n_classes, features.shape[1])
    return models, rhos
