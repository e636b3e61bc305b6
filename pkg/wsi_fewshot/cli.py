#!/usr/bin/env python3
"""
Command Line Module
Few-Shot Slide Classification Pipeline

One binary, one subcommand per pipeline step:

    synth-task       Gaussian few-shot task -> features.fsf, labels.csv, truth.csv
    synth-slide      coherent synthetic slide -> features, labels, manifest, truth
    fit              features + support labels -> JSON class model file
    classify         model + features + labels -> query posterior CSV
    sweep            manifest + features + labels + model -> class map CSV / PPM
    bench            method list + generator params -> results CSV
    eval             prediction CSV + truth CSV -> metrics on stdout
    stain-normalize  PPM + target stats -> normalized PPM
    stain-stats      PPM -> l-alpha-beta stats YAML

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from .baselines import SIMPLESHOT_VARIANTS
from .config import (
    SynthSlideConfig,
    SynthTaskConfig,
    build,
    coerce,
    config_key,
    load_config_file,
    merge_settings,
)
from .core import validate_task
from .data_loader import (
    SlideDatasetLoader,
    read_model,
    write_features,
    write_labels,
    write_manifest,
    write_model,
    write_posteriors,
)
from .errors import ConfigError, DataFormatError, FewShotError
from .evaluation import (
    PEJORATIVE_GROUPING,
    PEJORATIVE_NAMES,
    BenchConfig,
    benchmark_run,
    per_class_f1,
    score_files,
    score_predictions,
    write_results,
)
from .precision import GlassoConfig, fit_class_models
from .solver import SolverConfig, solve
from .stain import compute_stats, normalize, read_ppm, read_stats, write_ppm, write_stats
from .synth import COVARIANCE_SPECS, gen_slide, gen_task
from .windowing import SlideSweep, WindowSpec, label_image, render_class_map

logger = logging.getLogger(__name__)

DEFAULT_LAMBDA = SolverConfig.lam


class CliParser(argparse.ArgumentParser):
    """ArgumentParser that exits with status 1 on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _defaults(cls):
    return {item.name: item.default for item in fields(cls)}


def _flag(parser, name, default=None, kind=None, nargs=None, help=None, **kwargs):
    """Register a long flag that can also be set from the config file.

    argparse never fills in the default; resolve_settings merges it after the
    config file so explicit flags can be told apart.
    """
    dest = config_key(name)
    if default is not None and help is not None:
        help = f"{help} (default: {default})"
    parser.add_argument(name, dest=dest, type=kind, nargs=nargs, default=argparse.SUPPRESS,
                        help=help, **kwargs)
    parser.flag_specs[dest] = (default, kind, nargs is not None)


def _switch(parser, name, help):
    dest = config_key(name)
    parser.add_argument(name, dest=dest, action="store_true", default=argparse.SUPPRESS, help=help)
    parser.flag_specs[dest] = (False, bool, False)


def _common(parser):
    parser.flag_specs = {}
    parser.add_argument("--config", help="YAML file whose keys mirror the long flags")
    _flag(parser, "--seed", 0, int, help="random seed")
    _flag(parser, "--threads", 1, int, help="worker threads for parallel sections")
    _switch(parser, "--verbose", "debug logging")
    _switch(parser, "--quiet", "warnings only, no progress bars")


def _solver_flags(parser, lam_default=DEFAULT_LAMBDA):
    _flag(parser, "--lambda", lam_default, float, help="partition-complexity weight")
    _flag(parser, "--precision", "glasso", str, choices=("glasso", "identity"),
          help="class precision mode")
    _flag(parser, "--max-iters", SolverConfig.max_iters, int, help="solver iteration cap")
    _flag(parser, "--rel-tol", SolverConfig.rel_tol, float, help="solver convergence tolerance")


def build_parser():
    parser = CliParser(prog="wsi_fewshot", description="Transductive few-shot slide classification")
    commands = parser.add_subparsers(dest="command", metavar="command")

    sub = commands.add_parser("synth-task", help="generate a Gaussian few-shot task")
    _common(sub)
    task_defaults = _defaults(SynthTaskConfig)
    _flag(sub, "--classes", task_defaults["n_classes"], int, help="number of classes K")
    _flag(sub, "--dim", task_defaults["dim"], int, help="feature dimension d")
    _flag(sub, "--shots", task_defaults["shots"], int, help="support samples per class")
    _flag(sub, "--queries", task_defaults["queries"], int, help="query samples per class")
    _flag(sub, "--delta", task_defaults["delta"], float, help="class mean separation")
    _flag(sub, "--cov", task_defaults["cov_spec"], str, choices=COVARIANCE_SPECS,
          help="class covariance spec")
    _flag(sub, "--scale", task_defaults["scale"], float, help="covariance scale")
    _flag(sub, "--out-dir", ".", str, help="output directory")
    sub.set_defaults(handler=cmd_synth_task, command_parser=sub)

    sub = commands.add_parser("synth-slide", help="generate a coherent synthetic slide")
    _common(sub)
    slide_defaults = _defaults(SynthSlideConfig)
    _flag(sub, "--rows", slide_defaults["rows"], int, help="grid rows")
    _flag(sub, "--cols", slide_defaults["cols"], int, help="grid columns")
    _flag(sub, "--block", slide_defaults["block"], int, help="region block size in cells")
    _flag(sub, "--priors", slide_defaults["priors"], float, nargs="+", help="class priors")
    _flag(sub, "--dim", slide_defaults["dim"], int, help="feature dimension d")
    _flag(sub, "--delta", slide_defaults["delta"], float, help="class mean separation")
    _flag(sub, "--cov", slide_defaults["cov_spec"], str, choices=COVARIANCE_SPECS,
          help="class covariance spec")
    _flag(sub, "--shots", slide_defaults["shots"], int, help="support samples per class")
    _flag(sub, "--scale", slide_defaults["scale"], float, help="covariance scale")
    _flag(sub, "--out-dir", ".", str, help="output directory")
    sub.set_defaults(handler=cmd_synth_slide, command_parser=sub)

    sub = commands.add_parser("fit", help="fit per-class Gaussian models")
    _common(sub)
    _flag(sub, "--features", None, str, help="feature file (.fsf)")
    _flag(sub, "--labels", None, str, help="support labels CSV")
    _flag(sub, "--classes", None, int, help="number of classes K, inferred when omitted")
    _flag(sub, "--rho", None, float, help="Graphical Lasso penalty, 0.1 * mean(diag S) when omitted")
    _flag(sub, "--precision", "glasso", str, choices=("glasso", "identity"), help="precision mode")
    _flag(sub, "--max-sweeps", GlassoConfig.max_sweeps, int, help="Graphical Lasso sweep cap")
    _flag(sub, "--kkt-tol", GlassoConfig.kkt_tol, float, help="Graphical Lasso tolerance")
    _flag(sub, "--lambda", DEFAULT_LAMBDA, float, help="lambda recorded in the model file")
    _flag(sub, "--out", "model.json", str, help="model file")
    sub.set_defaults(handler=cmd_fit, command_parser=sub)

    sub = commands.add_parser("classify", help="transductive classification of query samples")
    _common(sub)
    _flag(sub, "--model", None, str, help="model file")
    _flag(sub, "--features", None, str, help="feature file (.fsf)")
    _flag(sub, "--labels", None, str, help="support labels CSV")
    _flag(sub, "--queries", None, str, help="CSV with an 'index' column; all unlabeled rows when omitted")
    _solver_flags(sub, lam_default=None)
    _flag(sub, "--out", "posteriors.csv", str, help="posterior CSV")
    sub.set_defaults(handler=cmd_classify, command_parser=sub)

    sub = commands.add_parser("sweep", help="sliding-window class map of a slide")
    _common(sub)
    _flag(sub, "--manifest", None, str, help="slide manifest CSV")
    _flag(sub, "--features", None, str, help="feature file (.fsf)")
    _flag(sub, "--labels", None, str, help="support labels CSV")
    _flag(sub, "--model", None, str, help="model file (paddle method)")
    _flag(sub, "--span", WindowSpec.span, int, help="window side in cells")
    _flag(sub, "--stride", WindowSpec.stride, int, help="window stride in cells")
    _flag(sub, "--method", "paddle", str, choices=("paddle", "simpleshot"), help="per-window classifier")
    _flag(sub, "--variant", "CL2N", str, choices=SIMPLESHOT_VARIANTS, help="SimpleShot transform")
    _solver_flags(sub, lam_default=None)
    _flag(sub, "--out-csv", "classmap.csv", str, help="class map CSV")
    _flag(sub, "--out-ppm", "classmap.ppm", str, help="class map PPM")
    _flag(sub, "--out-png", None, str, help="optional PNG preview")
    sub.set_defaults(handler=cmd_sweep, command_parser=sub)

    sub = commands.add_parser("bench", help="benchmark methods on synthetic tasks")
    _common(sub)
    bench = _defaults(BenchConfig)
    _flag(sub, "--methods", ["paddle-cov", "paddle", "simpleshot-CL2N"], str, nargs="+",
          help="methods to compare")
    _flag(sub, "--source", bench["source"], str, choices=("slides", "windows"), help="task source")
    _flag(sub, "--reps", bench["reps"], int, help="number of tasks")
    _flag(sub, "--classes", bench["n_classes"], int, help="number of classes K")
    _flag(sub, "--dim", bench["dim"], int, help="feature dimension d")
    _flag(sub, "--delta", bench["delta"], float, help="class mean separation")
    _flag(sub, "--cov", bench["cov_spec"], str, choices=COVARIANCE_SPECS, help="covariance spec")
    _flag(sub, "--scale", bench["scale"], float, help="covariance scale")
    _flag(sub, "--shots", bench["shots"], int, help="support samples per class")
    _flag(sub, "--rows", bench["rows"], int, help="slide rows")
    _flag(sub, "--cols", bench["cols"], int, help="slide columns")
    _flag(sub, "--block", bench["block"], int, help="region block size")
    _flag(sub, "--span", bench["span"], int, help="window side")
    _flag(sub, "--stride", bench["stride"], int, help="window stride")
    _flag(sub, "--window-size", bench["window_size"], int, help="queries per homogeneous window")
    _flag(sub, "--priors", bench["priors"], float, nargs="+", help="class priors")
    _flag(sub, "--lambda", bench["lam"], float, help="default lambda")
    _flag(sub, "--lambda-grid", bench["lambda_grid"], float, nargs="+", help="tuning grid")
    _flag(sub, "--tune-reps", bench["tune_reps"], int, help="held-out tasks for tuning")
    _flag(sub, "--max-iters", bench["max_iters"], int, help="solver iteration cap")
    _flag(sub, "--rho", bench["rho"], float, help="Graphical Lasso penalty")
    _flag(sub, "--out", "results.csv", str, help="results CSV")
    sub.set_defaults(handler=cmd_bench, command_parser=sub)

    sub = commands.add_parser("eval", help="score predictions against truth")
    _common(sub)
    _flag(sub, "--pred", None, str, help="posterior CSV or class map CSV")
    _flag(sub, "--truth", None, str, help="truth CSV (index,class or row,col,class)")
    _flag(sub, "--classes", None, int, help="number of classes K")
    _flag(sub, "--grouping", "none", str, choices=("none", "pejorative"), help="label regrouping")
    _flag(sub, "--out", None, str, help="optional YAML metrics file")
    sub.set_defaults(handler=cmd_eval, command_parser=sub)

    sub = commands.add_parser("stain-normalize", help="Reinhard stain normalization")
    _common(sub)
    _flag(sub, "--input", None, str, help="input PPM")
    _flag(sub, "--target-stats", None, str, help="target stats YAML")
    _flag(sub, "--target-image", None, str, help="reference PPM for the target stats")
    _flag(sub, "--out", "normalized.ppm", str, help="output PPM")
    sub.set_defaults(handler=cmd_stain_normalize, command_parser=sub)

    sub = commands.add_parser("stain-stats", help="l-alpha-beta stats of an image")
    _common(sub)
    _flag(sub, "--input", None, str, help="input PPM")
    _flag(sub, "--out", "stats.yaml", str, help="stats YAML")
    sub.set_defaults(handler=cmd_stain_stats, command_parser=sub)

    return parser


def resolve_settings(args):
    """Merge explicit flags, the config file and the built-in defaults."""
    specs = args.command_parser.flag_specs
    explicit = {key: value for key, value in vars(args).items() if key in specs}
    file_values = {}
    if args.config is not None:
        raw = load_config_file(args.config, specs)
        file_values = {key: coerce(key, value, specs[key][1], specs[key][2]) for key, value in raw.items()}
    defaults = {key: spec[0] for key, spec in specs.items()}
    settings = merge_settings(explicit, file_values, defaults)
    if settings["threads"] < 1:
        raise ConfigError(f"--threads must be >= 1, got {settings['threads']}")
    return settings


def configure_logging(settings):
    level = logging.INFO
    if settings.get("verbose"):
        level = logging.DEBUG
    elif settings.get("quiet"):
        level = logging.WARNING
    logging.basicConfig(stream=sys.stderr, format="%(message)s")
    logging.getLogger().setLevel(level)


def _require(settings, *keys):
    missing = [f"--{key.replace('_', '-')}" for key in keys if settings.get(key) is None]
    if missing:
        raise ConfigError(f"missing required option(s) {', '.join(missing)}")


def _configured(factory, **kwargs):
    """Build a settings object, reporting bad values as configuration errors."""
    try:
        return factory(**kwargs)
    except DataFormatError as exc:
        raise ConfigError(str(exc)) from exc


def _out_dir(settings):
    out = Path(settings["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _progress(settings):
    return not settings["quiet"]


def _solver_config(settings, meta=None):
    lam = settings["lam"]
    if lam is None:
        lam = (meta or {}).get("lambda")
    if lam is None:
        lam = DEFAULT_LAMBDA
    return _configured(SolverConfig, lam=float(lam), max_iters=settings["max_iters"],
                       rel_tol=settings["rel_tol"], precision_mode=settings["precision"])


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth_task(settings):
    cfg = _configured(build, cls=SynthTaskConfig, settings=settings)
    synth = gen_task(cfg.n_classes, cfg.dim, cfg.shots, cfg.queries, cfg.delta, cfg.cov_spec,
                     seed=settings["seed"], scale=cfg.scale)
    out = _out_dir(settings)
    task = synth.task
    write_features(task.features, out / "features.fsf")
    write_labels(out / "labels.csv", (task.support_indices, task.support_classes))
    write_labels(out / "truth.csv", (task.query_indices, synth.query_truth))
    logger.info("✅ Task with %d support and %d query samples written to %s",
                task.n_support, task.n_query, out)


def cmd_synth_slide(settings):
    cfg = _configured(build, cls=SynthSlideConfig, settings=settings)
    slide = gen_slide(cfg.rows, cfg.cols, cfg.block, cfg.priors, cfg.dim, cfg.delta, cfg.cov_spec,
                      cfg.shots, seed=settings["seed"], scale=cfg.scale)
    out = _out_dir(settings)
    grid = slide.grid
    write_features(slide.features, out / "features.fsf")
    write_labels(out / "labels.csv", (slide.support.indices, slide.support.classes))
    write_manifest(out / "manifest.csv", grid)
    pd.DataFrame({"row": grid.rows, "col": grid.cols, "class": grid.true_class}).to_csv(
        out / "truth.csv", index=False, lineterminator="\n"
    )
    write_ppm(out / "truth.ppm", label_image(slide.truth))
    logger.info("✅ %d x %d slide written to %s", cfg.rows, cfg.cols, out)


def cmd_fit(settings):
    _require(settings, "features", "labels")
    loader = SlideDatasetLoader(settings["features"], settings["labels"],
                                n_classes=settings["n_classes"]).load_data()
    cfg = _configured(GlassoConfig, rho=settings["rho"], max_sweeps=settings["max_sweeps"],
                      kkt_tol=settings["kkt_tol"])
    models, rhos = fit_class_models(loader.support, cfg, precision_mode=settings["precision"],
                                    n_jobs=settings["threads"])
    write_model(settings["out"], models, lam=settings["lam"], rho=settings["rho"], class_rho=rhos)


def cmd_classify(settings):
    _require(settings, "model", "features", "labels")
    models, meta = read_model(settings["model"])
    loader = SlideDatasetLoader(settings["features"], settings["labels"],
                                n_classes=len(models)).load_data()
    if settings["queries"] is not None:
        frame = pd.read_csv(settings["queries"])
        if "index" not in frame.columns:
            raise DataFormatError(f"{settings['queries']}: missing 'index' column")
        query_indices = frame["index"].to_numpy(dtype=np.int64)
    else:
        query_indices = loader.default_query_indices()
    task = loader.support.task_for(query_indices)
    validate_task(task).raise_if_failed()

    result = solve(task, models, _solver_config(settings, meta))
    write_posteriors(settings["out"], task.query_indices, result.query_posteriors)
    status = "converged" if result.converged else "stopped at the iteration cap"
    logger.info("✅ Classified %d queries (%s after %d iterations) -> %s",
                task.n_query, status, result.iterations, settings["out"])


def cmd_sweep(settings):
    _require(settings, "manifest", "features", "labels")
    loader = SlideDatasetLoader(settings["features"], settings["labels"],
                                manifest_path=settings["manifest"]).load_data()
    models, meta = None, None
    if settings["method"] == "paddle":
        _require(settings, "model")
        models, meta = read_model(settings["model"])
        if len(models) != loader.n_classes:
            raise DataFormatError(f"model has {len(models)} classes, slide has {loader.n_classes}")
    window_spec = _configured(WindowSpec, span=settings["span"], stride=settings["stride"])
    sweep = SlideSweep(
        loader.grid, loader.support, models=models,
        solver_config=_solver_config(settings, meta),
        window_spec=window_spec, method=settings["method"], variant=settings["variant"],
        n_jobs=settings["threads"], progress=_progress(settings),
    )
    class_map = sweep.run()
    render_class_map(class_map, settings["out_csv"], settings["out_ppm"], settings["out_png"])

    truth = loader.grid.truth_map()
    if np.any(truth >= 0):
        scores = score_predictions(class_map.argmax.ravel(), truth.ravel(), loader.n_classes)
        logger.info("✅ Accuracy on labelled cells: %.2f%% (macro-F1 %.2f%%)",
                    100 * scores.accuracy, 100 * scores.macro_f1)


def cmd_bench(settings):
    cfg = _configured(build, cls=BenchConfig, settings=settings)
    results = benchmark_run(settings["methods"], cfg, seed=settings["seed"],
                            n_jobs=settings["threads"], progress=_progress(settings))
    write_results(settings["out"], results)
    logger.info("✅ Results written to %s", settings["out"])


def _plain(value):
    return None if isinstance(value, float) and np.isnan(value) else value


def cmd_eval(settings):
    _require(settings, "pred", "truth")
    grouping = PEJORATIVE_GROUPING if settings["grouping"] == "pejorative" else None
    scores = score_files(settings["pred"], settings["truth"], settings["n_classes"], grouping)
    summary = scores.as_dict()
    if grouping is not None:
        summary["groups"] = list(PEJORATIVE_NAMES)
    summary["per_class_f1"] = [_plain(float(v)) for v in per_class_f1(scores.confusion)]
    summary["confusion"] = scores.confusion.tolist()
    text = yaml.safe_dump(summary, sort_keys=False)
    sys.stdout.write(text)
    if settings["out"] is not None:
        Path(settings["out"]).write_text(text, encoding="utf-8")


def cmd_stain_normalize(settings):
    _require(settings, "input")
    if settings["target_image"] is not None:
        target = compute_stats(read_ppm(settings["target_image"]))
    elif settings["target_stats"] is not None:
        target = read_stats(settings["target_stats"])
    else:
        raise ConfigError("stain-normalize needs --target-stats or --target-image")
    write_ppm(settings["out"], normalize(read_ppm(settings["input"]), target))
    logger.info("✅ Normalized %s -> %s", settings["input"], settings["out"])


def cmd_stain_stats(settings):
    _require(settings, "input")
    stats = compute_stats(read_ppm(settings["input"]))
    write_stats(settings["out"], stats)
    logger.info("✅ Stats of %s written to %s", settings["input"], settings["out"])


def main(argv=None):
    """Run one subcommand; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1

    try:
        settings = resolve_settings(args)
        configure_logging(settings)
        args.handler(settings)
    except FewShotError as exc:
        logger.error("❌ %s", exc)
        return exc.exit_code
    except FileNotFoundError as exc:
        logger.error("❌ No such file: %s", exc.filename or exc)
        return 2
    except OSError as exc:
        logger.error("❌ %s: %s", exc.filename or "I/O error", exc.strerror or exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
