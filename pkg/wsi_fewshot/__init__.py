"""
Few-Shot Slide Classification Pipeline

Transductive few-shot classification of tiled whole-slide images: sparse
per-class precision estimation, the covariance-aware alternating solver,
sliding-window class maps, inductive baselines, stain normalization,
synthetic generators and the benchmark harness.
"""

from .core import CLASS_NAMES, CLASS_PRIORS, UNLABELED, FeatureMatrix, FewShotTask, validate_task
from .errors import ConfigError, DataFormatError, FewShotError, NumericalError
from .precision import GlassoConfig, fit_class_models, graphical_lasso
from .solver import SolverConfig, SolveResult, solve

__version__ = "0.1.0"

__all__ = [
    "CLASS_NAMES",
    "CLASS_PRIORS",
    "UNLABELED",
    "ConfigError",
    "DataFormatError",
    "FeatureMatrix",
    "FewShotError",
    "FewShotTask",
    "GlassoConfig",
    "NumericalError",
    "SolveResult",
    "SolverConfig",
    "fit_class_models",
    "graphical_lasso",
    "solve",
    "validate_task",
]
