#!/usr/bin/env python3
"""
Evaluation Module
Few-Shot Slide Classification Pipeline

This module provides the classification metrics (confusion matrix,
accuracy, macro / weighted F1), the coarse tumor-grade regrouping, lambda
tuning on held-out tasks and the benchmark runner comparing methods on an
identical stream of synthetic tasks.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy import stats
from sklearn.metrics import confusion_matrix as _sk_confusion_matrix
from tqdm import tqdm

from .baselines import SIMPLESHOT_VARIANTS, simpleshot
from .core import CLASS_PRIORS, UNLABELED, FeatureMatrix, SupportSet
from .errors import DataFormatError, FewShotError
from .precision import GlassoConfig, fit_class_models
from .solver import SolverConfig, solve
from .synth import gen_slide, gen_window_tasks, make_class_bank
from .windowing import SlideSweep, WindowSpec

logger = logging.getLogger(__name__)

RESULT_COLUMNS = ["method", "mean_accuracy", "stderr_accuracy",
                  "mean_macro_f1", "stderr_macro_f1", "n_tasks"]

# NT -> non-tumor, AN -> non-pejorative tumor, AM / VE -> pejorative tumor, RE dropped
PEJORATIVE_GROUPING = {0: 0, 1: UNLABELED, 2: 2, 3: 2, 4: 1}
PEJORATIVE_NAMES = ("non-tumor", "non-pejorative", "pejorative")


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def scored_pairs(pred, truth):
    """Drop pairs where either side is the unlabeled sentinel.

    Returns:
        tuple: (pred, truth, number of excluded pairs)
    """
    pred = np.asarray(pred, dtype=np.int64).ravel()
    truth = np.asarray(truth, dtype=np.int64).ravel()
    if pred.size != truth.size:
        raise DataFormatError(f"{pred.size} predictions for {truth.size} truth labels")
    if pred.size == 0:
        raise DataFormatError("no predictions to score")
    keep = (pred != UNLABELED) & (truth != UNLABELED)
    return pred[keep], truth[keep], int(np.count_nonzero(~keep))


def confusion_matrix(pred, truth, n_classes):
    """K x K counts, rows = truth, columns = prediction; sentinel pairs excluded."""
    pred, truth, _ = scored_pairs(pred, truth)
    out_of_range = (pred < 0) | (pred >= n_classes) | (truth < 0) | (truth >= n_classes)
    if out_of_range.any():
        raise DataFormatError(f"labels outside 0..{n_classes - 1}")
    if pred.size == 0:
        return np.zeros((n_classes, n_classes), dtype=np.int64)
    return _sk_confusion_matrix(truth, pred, labels=np.arange(n_classes)).astype(np.int64)


def accuracy(cm):
    total = cm.sum()
    if total == 0:
        raise DataFormatError("empty confusion matrix")
    return float(np.trace(cm) / total)


def per_class_f1(cm):
    """F1 per class; NaN for classes absent from both truth and predictions."""
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    predicted, actual = cm.sum(axis=0), cm.sum(axis=1)
    denominator = predicted + actual
    f1 = np.full(cm.shape[0], np.nan)
    present = denominator > 0
    f1[present] = 2.0 * tp[present] / denominator[present]
    return f1


def macro_f1(cm):
    """Unweighted mean F1 over classes present in truth or predictions."""
    f1 = per_class_f1(cm)
    if np.all(np.isnan(f1)):
        raise DataFormatError("empty confusion matrix")
    return float(np.nanmean(f1))


def weighted_f1(cm):
    """F1 averaged with weights equal to each class's truth count."""
    f1 = np.nan_to_num(per_class_f1(cm))
    support = np.asarray(cm).sum(axis=1)
    if support.sum() == 0:
        raise DataFormatError("empty confusion matrix")
    return float(np.sum(f1 * support) / support.sum())


@dataclass
class Scores:
    confusion: np.ndarray
    accuracy: float
    macro_f1: float
    weighted_f1: float
    n_scored: int
    n_unlabeled: int

    @property
    def coverage(self):
        return self.n_scored / (self.n_scored + self.n_unlabeled)

    def as_dict(self):
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "weighted_f1": self.weighted_f1,
            "n_scored": self.n_scored,
            "n_unlabeled": self.n_unlabeled,
            "coverage": self.coverage,
        }


def score_predictions(pred, truth, n_classes):
    """All metrics for aligned prediction / truth label lists."""
    kept_pred, kept_truth, n_unlabeled = scored_pairs(pred, truth)
    if kept_pred.size == 0:
        raise DataFormatError("every pair carries the unlabeled sentinel")
    cm = confusion_matrix(kept_pred, kept_truth, n_classes)
    return Scores(cm, accuracy(cm), macro_f1(cm), weighted_f1(cm),
                  int(kept_pred.size), n_unlabeled)


def regroup_labels(labels, mapping):
    """Map class ids through ``mapping``; the sentinel stays the sentinel."""
    labels = np.asarray(labels, dtype=np.int64)
    out = np.full(labels.shape, UNLABELED, dtype=np.int64)
    for source, target in mapping.items():
        out[labels == source] = target
    return out


def score_files(pred_path, truth_path, n_classes=None, grouping=None):
    """Score a posterior CSV or class-map CSV against a truth CSV.

    Posterior CSVs (query_index,...) join on ``index`` with an
    "index,class" truth file; class-map CSVs (row,col,...) join on
    ``row,col`` with a "row,col,class" truth file.
    """
    pred = pd.read_csv(pred_path)
    truth = pd.read_csv(truth_path)
    if "query_index" in pred.columns:
        pred = pred.rename(columns={"query_index": "index"})
        keys = ["index"]
    elif {"row", "col"} <= set(pred.columns):
        keys = ["row", "col"]
    else:
        raise DataFormatError(f"{pred_path}: neither a posterior nor a class map CSV")
    missing = set(keys + ["class"]) - set(truth.columns)
    if missing:
        raise DataFormatError(f"{truth_path}: missing columns {sorted(missing)}")

    merged = pred[keys + ["argmax"]].merge(truth[keys + ["class"]], on=keys, how="inner")
    if merged.empty:
        raise DataFormatError("predictions and truth share no keys")
    predicted = merged["argmax"].to_numpy()
    actual = merged["class"].to_numpy()
    if n_classes is None:
        prob_cols = [c for c in pred.columns if c.startswith("p_")]
        n_classes = len(prob_cols) or int(max(predicted.max(), actual.max())) + 1
    if grouping is not None:
        predicted, actual = regroup_labels(predicted, grouping), regroup_labels(actual, grouping)
        n_classes = max(grouping.values()) + 1
    return score_predictions(predicted, actual, n_classes)


# ---------------------------------------------------------------------------
# Methods
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MethodSpec:
    """One benchmark entry.

    kind "paddle" uses the transductive solver (precision_mode "glasso" for
    PADDLE-Cov, "identity" for plain PADDLE); kind "simpleshot" the inductive
    baseline. ``lam`` None means the configured default, "tuned" means tuned
    on held-out tasks.
    """

    label: str
    kind: str
    precision_mode: str = "glasso"
    lam: object = None
    variant: str = "CL2N"


def parse_method(text):
    """Parse "paddle-cov", "paddle-cov:lambda=0", "paddle-cov-tuned", "paddle:lambda=0",
    "simpleshot-UN" and similar method strings."""
    label = text.strip()
    name, _, option = label.partition(":")
    if name.startswith("simpleshot"):
        variant = name.partition("-")[2] or option or "CL2N"
        if variant not in SIMPLESHOT_VARIANTS:
            raise DataFormatError(f"unknown SimpleShot variant in {label!r}")
        return MethodSpec(label=label, kind="simpleshot", variant=variant)

    lam = None
    if name.endswith("-tuned"):
        name, lam = name[: -len("-tuned")], "tuned"
    if option:
        key, _, value = option.partition("=")
        if key not in ("lambda", "lam"):
            raise DataFormatError(f"unknown method option {option!r} in {label!r}")
        lam = "tuned" if value == "tuned" else float(value)
    modes = {"paddle-cov": "glasso", "paddle": "identity"}
    if name not in modes:
        raise DataFormatError(f"unknown method {label!r}")
    return MethodSpec(label=label, kind="paddle", precision_mode=modes[name], lam=lam)


@dataclass(frozen=True)
class BenchConfig:
    """Benchmark generator and method settings."""

    source: str = "slides"
    reps: int = 20
    n_classes: int = 5
    dim: int = 32
    delta: float = 3.0
    cov_spec: str = "spd"
    scale: float = 1.0
    shots: int = 10
    rows: int = 10
    cols: int = 10
    block: int = 5
    span: int = 5
    stride: int = 5
    window_size: int = 25
    priors: tuple = CLASS_PRIORS
    lam: float = 1250.0
    lambda_grid: tuple = (0.0, 10.0, 50.0, 100.0, 250.0, 500.0, 1250.0, 2500.0)
    tune_reps: int = 50
    max_iters: int = 100
    rho: float | None = None

    def __post_init__(self):
        if self.source not in ("slides", "windows"):
            raise DataFormatError(f"unknown task source {self.source!r}")
        if self.reps < 1:
            raise DataFormatError("bench needs at least one repetition")
        if len(self.priors) != self.n_classes:
            raise DataFormatError(f"{len(self.priors)} priors for {self.n_classes} classes")


def _stderr(values):
    values = np.asarray(values, dtype=np.float64)
    return float(stats.sem(values)) if values.size > 1 else 0.0


@dataclass
class TaskOutcome:
    accuracy: float = np.nan
    macro_f1: float = np.nan
    error: str | None = None


@dataclass
class BenchmarkRunner:
    """Evaluate every method on one deterministic stream of synthetic tasks."""

    methods: list
    config: BenchConfig = field(default_factory=BenchConfig)
    seed: int = 0
    n_jobs: int = 1
    progress: bool = False

    def __post_init__(self):
        if not self.methods:
            raise DataFormatError("bench needs at least one method")
        self.methods = [m if isinstance(m, MethodSpec) else parse_method(m) for m in self.methods]
        cfg = self.config
        self.bank = make_class_bank(cfg.n_classes, cfg.dim, cfg.delta, cfg.cov_spec,
                                    seed=[self.seed, 0], scale=cfg.scale)
        self.support = self.bank.draw_support(cfg.shots, np.random.default_rng([self.seed, 4]))
        self._models = None
        self._tuned = {}
        self.outcomes = {}
        self.tuned_lambdas = {}

    # -- task streams ------------------------------------------------------

    def task_stream(self, stream_seed, count):
        """``count`` tasks (slides or homogeneous windows) from ``stream_seed``."""
        cfg = self.config
        if cfg.source == "windows":
            return gen_window_tasks(self.bank, count, cfg.window_size, cfg.priors,
                                    support=self.support, seed=stream_seed)
        return [
            gen_slide(cfg.rows, cfg.cols, cfg.block, cfg.priors, bank=self.bank,
                      support=self.support, seed=[stream_seed, rep])
            for rep in range(count)
        ]

    # -- models and solvers ------------------------------------------------

    def models(self):
        """Class models fitted once on the support block shared by every task."""
        if self._models is None:
            support_x, support_y = self.support
            support = SupportSet.from_classes(FeatureMatrix(support_x), np.arange(support_y.size),
                                              support_y, self.config.n_classes)
            self._models, _ = fit_class_models(support, GlassoConfig(rho=self.config.rho),
                                               n_jobs=self.n_jobs)
        return self._models

    def solver_config(self, method, lam):
        return SolverConfig(lam=lam, max_iters=self.config.max_iters,
                            precision_mode=method.precision_mode)

    def predict(self, method, item, lam=None):
        """Predictions and truth for one task under one method."""
        cfg = self.config
        if cfg.source == "windows":
            if method.kind == "simpleshot":
                pred = simpleshot(item.task, method.variant)
            else:
                pred = solve(item.task, self.models(), self.solver_config(method, lam)).predictions()
            return pred, item.query_truth

        sweep = SlideSweep(
            item.grid, item.support,
            models=self.models() if method.kind == "paddle" else None,
            solver_config=self.solver_config(method, lam) if method.kind == "paddle" else None,
            window_spec=WindowSpec(cfg.span, cfg.stride),
            method="paddle" if method.kind == "paddle" else "simpleshot",
            variant=method.variant,
        )
        return sweep.run().argmax, item.truth

    def evaluate(self, method, item, lam=None):
        try:
            pred, truth = self.predict(method, item, lam)
            scores = score_predictions(pred, truth, self.config.n_classes)
        except FewShotError as exc:
            return TaskOutcome(error=str(exc))
        return TaskOutcome(scores.accuracy, scores.macro_f1)

    def resolve_lambda(self, method):
        if method.kind != "paddle":
            return None
        if method.lam is None:
            return self.config.lam
        if method.lam != "tuned":
            return float(method.lam)
        if method.precision_mode not in self._tuned:
            validation = self.task_stream(self.seed + 1, self.config.tune_reps)
            best, table = tune_lambda(
                self.config.lambda_grid,
                lambda lam: self._mean_accuracy(method, validation, lam),
            )
            self._tuned[method.precision_mode] = best
            logger.info("✅ Tuned lambda for %s: %g (grid %s)", method.label, best,
                        {k: round(v, 4) for k, v in table.items()})
        return self._tuned[method.precision_mode]

    def _mean_accuracy(self, method, tasks, lam):
        outcomes = self._run_tasks(method, tasks, lam)
        values = [o.accuracy for o in outcomes if o.error is None]
        return float(np.mean(values)) if values else -np.inf

    def _run_tasks(self, method, tasks, lam):
        iterator = tqdm(tasks, desc=method.label, disable=not self.progress, leave=False)
        return Parallel(n_jobs=self.n_jobs, prefer="threads")(
            delayed(self.evaluate)(method, item, lam) for item in iterator
        )

    # -- driver ------------------------------------------------------------

    def run(self):
        """Run every method on the same task stream and tabulate the results."""
        tasks = self.task_stream(self.seed, self.config.reps)
        for method in self.methods:
            lam = self.resolve_lambda(method)
            self.tuned_lambdas[method.label] = lam
            self.outcomes[method.label] = self._run_tasks(method, tasks, lam)

        failed = np.zeros(len(tasks), dtype=bool)
        for label, outcomes in self.outcomes.items():
            errors = np.array([o.error is not None for o in outcomes])
            if errors.any():
                logger.warning("⚠️ %s failed on %d task(s): %s", label, int(errors.sum()),
                               next(o.error for o in outcomes if o.error))
            failed |= errors
        if failed.any():
            logger.warning("⚠️ Excluding %d task(s) from every method", int(failed.sum()))

        rows = []
        for method in self.methods:
            kept = [o for o, bad in zip(self.outcomes[method.label], failed) if not bad]
            acc = [o.accuracy for o in kept]
            f1 = [o.macro_f1 for o in kept]
            rows.append({
                "method": method.label,
                "mean_accuracy": float(np.mean(acc)) if acc else np.nan,
                "stderr_accuracy": _stderr(acc),
                "mean_macro_f1": float(np.mean(f1)) if f1 else np.nan,
                "stderr_macro_f1": _stderr(f1),
                "n_tasks": len(kept),
            })
        frame = pd.DataFrame(rows, columns=RESULT_COLUMNS)
        return frame.sort_values("method", kind="stable").reset_index(drop=True)

    def report(self, results):
        """Log a formatted summary table."""
        logger.info("=" * 80)
        logger.info("BENCHMARK RESULTS (%s, %d tasks, seed %d)",
                    self.config.source, self.config.reps, self.seed)
        logger.info("=" * 80)
        for row in results.itertuples(index=False):
            logger.info("  %-28s acc %6.2f%% ± %5.2f | macro-F1 %6.2f%% ± %5.2f | n=%d",
                        row.method, 100 * row.mean_accuracy, 100 * row.stderr_accuracy,
                        100 * row.mean_macro_f1, 100 * row.stderr_macro_f1, row.n_tasks)


def tune_lambda(grid, evaluate):
    """Pick the lambda with the highest validation score; ties go to the smallest lambda.

    Args:
        grid (iterable of float): Candidate lambdas
        evaluate (callable): lambda -> mean validation accuracy

    Returns:
        tuple: (best lambda, dict of lambda -> score)
    """
    table = {float(lam): float(evaluate(float(lam))) for lam in sorted(grid)}
    if not table:
        raise DataFormatError("empty lambda grid")
    best = max(table, key=lambda lam: (table[lam], -lam))
    return best, table


def benchmark_run(methods, config=None, seed=0, n_jobs=1, progress=False):
    """Convenience wrapper: run a BenchmarkRunner and return its results table."""
    runner = BenchmarkRunner(list(methods), config or BenchConfig(), seed, n_jobs, progress)
    results = runner.run()
    runner.report(results)
    return results


def write_results(path, results):
    results.to_csv(path, index=False, float_format="%.6f", lineterminator="\n")
