import numpy as np
import pandas as pd
import pytest
from sklearn.metrics import f1_score

from wsi_fewshot.baselines import simpleshot
from wsi_fewshot.core import UNLABELED
from wsi_fewshot.errors import DataFormatError, NumericalError
from wsi_fewshot.evaluation import (
    PEJORATIVE_GROUPING,
    RESULT_COLUMNS,
    BenchConfig,
    BenchmarkRunner,
    accuracy,
    benchmark_run,
    confusion_matrix,
    macro_f1,
    parse_method,
    per_class_f1,
    regroup_labels,
    score_files,
    score_predictions,
    tune_lambda,
    weighted_f1,
    write_results,
)

WINDOWS = BenchConfig(source="windows", reps=4, dim=4, shots=4, window_size=10, cov_spec="identity")


def test_perfect_predictions():
    labels = np.array([0, 1, 2, 2, 4])
    scores = score_predictions(labels, labels, 5)
    assert scores.accuracy == 1.0
    assert scores.macro_f1 == 1.0


def test_constant_prediction_two_classes():
    cm = confusion_matrix([0, 0, 0, 0], [0, 0, 1, 1], 2)
    np.testing.assert_array_equal(cm, [[2, 0], [2, 0]])
    assert accuracy(cm) == 0.5
    assert macro_f1(cm) == pytest.approx(1.0 / 3.0)


def test_absent_class_is_excluded_from_macro_mean():
    pred, truth = [0, 1, 1, 0], [0, 1, 0, 0]
    cm = confusion_matrix(pred, truth, 4)
    assert np.isnan(per_class_f1(cm)[2:]).all()
    assert macro_f1(cm) == pytest.approx(f1_score(truth, pred, average="macro"))
    assert weighted_f1(cm) == pytest.approx(f1_score(truth, pred, average="weighted"))


def test_confusion_counts_and_diagonal_identity(rng):
    truth = rng.integers(0, 5, size=200)
    pred = np.where(rng.random(200) < 0.7, truth, rng.integers(0, 5, size=200))
    cm = confusion_matrix(pred, truth, 5)
    assert cm.sum() == 200
    assert 0.0 <= macro_f1(cm) <= 1.0
    diagonal = np.diag([3, 5, 1])
    assert macro_f1(diagonal) == accuracy(diagonal) == 1.0


def test_sentinel_pairs_are_counted_separately():
    scores = score_predictions([0, 1, UNLABELED, 1], [0, 1, 1, UNLABELED], 2)
    assert scores.n_scored == 2
    assert scores.n_unlabeled == 2
    assert scores.coverage == 0.5
    assert scores.confusion.sum() == 2


def test_metric_errors():
    with pytest.raises(DataFormatError, match="truth labels"):
        confusion_matrix([0, 1], [0], 2)
    with pytest.raises(DataFormatError):
        confusion_matrix([], [], 2)
    with pytest.raises(DataFormatError, match="outside"):
        confusion_matrix([0, 3], [0, 1], 2)
    with pytest.raises(DataFormatError):
        score_predictions([UNLABELED], [0], 2)


def test_pejorative_regrouping():
    labels = np.array([0, 1, 2, 3, 4, UNLABELED])
    np.testing.assert_array_equal(regroup_labels(labels, PEJORATIVE_GROUPING),
                                  [0, UNLABELED, 2, 2, 1, UNLABELED])


@pytest.mark.parametrize("text, kind, mode, lam, variant", [
    ("paddle-cov", "paddle", "glasso", None, "CL2N"),
    ("paddle-cov:lambda=0", "paddle", "glasso", 0.0, "CL2N"),
    ("paddle-cov-tuned", "paddle", "glasso", "tuned", "CL2N"),
    ("paddle:lambda=0", "paddle", "identity", 0.0, "CL2N"),
    ("simpleshot-UN", "simpleshot", "glasso", None, "UN"),
    ("simpleshot:L2N", "simpleshot", "glasso", None, "L2N"),
])
def test_parse_method(text, kind, mode, lam, variant):
    method = parse_method(text)
    assert (method.kind, method.precision_mode, method.lam, method.variant) == (kind, mode, lam, variant)
    assert method.label == text


@pytest.mark.parametrize("text", ["knn", "paddle-cov:gamma=1", "simpleshot-ZCA"])
def test_parse_method_rejects(text):
    with pytest.raises(DataFormatError):
        parse_method(text)


def test_tune_lambda_prefers_smallest_on_ties():
    scores = {0.0: 0.5, 10.0: 0.8, 50.0: 0.8, 100.0: 0.7}
    best, table = tune_lambda([100.0, 50.0, 10.0, 0.0], scores.__getitem__)
    assert best == 10.0
    assert table == scores


def test_single_task_row_equals_direct_metric():
    cfg = BenchConfig(source="windows", reps=1, dim=4, shots=4, window_size=10, cov_spec="identity")
    runner = BenchmarkRunner(["simpleshot-UN"], cfg, seed=3)
    results = runner.run()
    item = runner.task_stream(3, 1)[0]
    direct = score_predictions(simpleshot(item.task, "UN"), item.query_truth, 5)
    row = results.iloc[0]
    assert list(results.columns) == RESULT_COLUMNS
    assert row["mean_accuracy"] == direct.accuracy
    assert row["mean_macro_f1"] == direct.macro_f1
    assert row["stderr_accuracy"] == 0.0
    assert row["n_tasks"] == 1


def test_identical_methods_give_identical_rows():
    results = benchmark_run(["paddle-cov", "paddle-cov"], WINDOWS, seed=1)
    assert len(results) == 2
    first, second = results.iloc[0], results.iloc[1]
    assert first.equals(second)


def test_results_do_not_depend_on_method_order():
    forward = benchmark_run(["simpleshot-UN", "paddle:lambda=0"], WINDOWS, seed=2)
    backward = benchmark_run(["paddle:lambda=0", "simpleshot-UN"], WINDOWS, seed=2)
    pd.testing.assert_frame_equal(forward, backward)
    assert forward["method"].tolist() == ["paddle:lambda=0", "simpleshot-UN"]


def test_benchmark_threads_and_reruns_are_identical(tmp_path):
    serial = benchmark_run(["paddle-cov", "simpleshot-CL2N"], WINDOWS, seed=4, n_jobs=1)
    threaded = benchmark_run(["paddle-cov", "simpleshot-CL2N"], WINDOWS, seed=4, n_jobs=3)
    write_results(tmp_path / "a.csv", serial)
    write_results(tmp_path / "b.csv", threaded)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_slide_source_runs():
    cfg = BenchConfig(source="slides", reps=2, rows=6, cols=6, block=3, span=3, stride=3,
                      dim=4, shots=4, cov_spec="identity")
    results = benchmark_run(["paddle", "simpleshot-CL2N"], cfg, seed=0)
    assert (results["n_tasks"] == 2).all()
    assert results["mean_accuracy"].between(0.0, 1.0).all()


def test_failed_task_is_excluded_for_every_method():
    class FlakyRunner(BenchmarkRunner):
        calls = 0

        def predict(self, method, item, lam=None):
            if method.kind == "paddle":
                FlakyRunner.calls += 1
                if FlakyRunner.calls == 2:
                    raise NumericalError("synthetic failure")
            return super().predict(method, item, lam)

    runner = FlakyRunner(["paddle", "simpleshot-UN"], WINDOWS, seed=5, n_jobs=1)
    results = runner.run()
    assert (results["n_tasks"] == WINDOWS.reps - 1).all()
    assert runner.outcomes["paddle"][1].error == "synthetic failure"


def test_tuned_lambda_is_taken_from_grid():
    cfg = BenchConfig(source="windows", reps=2, dim=4, shots=4, window_size=10,
                      cov_spec="identity", lambda_grid=(0.0, 100.0), tune_reps=3)
    runner = BenchmarkRunner(["paddle-cov-tuned"], cfg, seed=6)
    runner.run()
    assert runner.tuned_lambdas["paddle-cov-tuned"] in (0.0, 100.0)


def test_bench_config_validation():
    with pytest.raises(DataFormatError):
        BenchConfig(source="patients")
    with pytest.raises(DataFormatError):
        BenchConfig(reps=0)
    with pytest.raises(DataFormatError):
        BenchmarkRunner([], WINDOWS)


def test_score_posterior_and_class_map_files(tmp_path):
    pred = tmp_path / "post.csv"
    pred.write_text("query_index,p_0,p_1,argmax\n5,0.9,0.1,0\n6,0.2,0.8,1\n7,0.6,0.4,0\n")
    truth = tmp_path / "truth.csv"
    truth.write_text("index,class\n5,0\n6,1\n7,1\n")
    scores = score_files(pred, truth)
    assert scores.accuracy == pytest.approx(2 / 3)

    class_map = tmp_path / "map.csv"
    class_map.write_text(
        "row,col,argmax,p_0,p_1,p_2,p_3,p_4,coverage\n"
        "0,0,2,0,0,1,0,0,1\n0,1,3,0,0,0,1,0,1\n0,2,1,0,1,0,0,0,1\n0,3,-1,,,,,,0\n"
    )
    cells = tmp_path / "cells.csv"
    cells.write_text("row,col,class\n0,0,2\n0,1,2\n0,2,1\n0,3,4\n")
    scores = score_files(class_map, cells)
    assert scores.accuracy == pytest.approx(2 / 3)
    assert scores.n_unlabeled == 1

    grouped = score_files(class_map, cells, grouping=PEJORATIVE_GROUPING)
    assert grouped.accuracy == 1.0
    assert grouped.n_scored == 2


@pytest.mark.slow
def test_transduction_benefit_ordering():
    cfg = BenchConfig(source="slides", reps=500, rows=10, cols=10, block=5, span=5, stride=5,
                      dim=32, shots=10, cov_spec="spd", tune_reps=50)
    methods = ["paddle-cov-tuned", "paddle-cov:lambda=0", "paddle:lambda=0",
               "simpleshot-UN", "simpleshot-L2N", "simpleshot-CL2N"]
    results = benchmark_run(methods, cfg, seed=0, n_jobs=4).set_index("method")["mean_accuracy"]
    assert results["paddle-cov-tuned"] >= results["paddle-cov:lambda=0"] + 0.02
    assert results["paddle-cov:lambda=0"] >= results["paddle:lambda=0"] + 0.02
    best_simpleshot = max(results[m] for m in methods if m.startswith("simpleshot"))
    assert results["paddle-cov-tuned"] > best_simpleshot
