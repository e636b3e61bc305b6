import itertools

import numpy as np
import pytest
from scipy.special import softmax

from wsi_fewshot.baselines import simpleshot
from wsi_fewshot.core import AssignmentMatrix, ClassModel, FeatureMatrix, FewShotTask
from wsi_fewshot.errors import DataFormatError, NumericalError
from wsi_fewshot.objective import data_fidelity, partition_entropy, total_objective
from wsi_fewshot.precision import support_means
from wsi_fewshot.solver import (
    SolverConfig,
    assignment_update,
    centroid_update,
    floored_log_proportions,
    initialize,
    proportion_update,
    relative_change,
    softmax_rows,
    solve,
)
from wsi_fewshot.synth import gen_task

from .conftest import random_spd


def gaussian_task(seed, n_classes=5, dim=8, shots=3, queries=6, delta=3.0, query_classes=None):
    """Random task with SPD class models centred on the class means."""
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((n_classes, dim))
    means *= delta / np.linalg.norm(means, axis=1, keepdims=True)
    precisions = [random_spd(dim, rng, 0.5, 2.0) for _ in range(n_classes)]
    chols = [np.linalg.cholesky(np.linalg.inv(p)) for p in precisions]

    support_y = np.repeat(np.arange(n_classes), shots)
    query_pool = np.arange(n_classes) if query_classes is None else np.asarray(query_classes)
    query_y = rng.permutation(np.repeat(query_pool, queries))
    labels = np.concatenate([support_y, query_y])
    samples = np.stack([means[k] + chols[k] @ rng.standard_normal(dim) for k in labels])
    task = FewShotTask.from_classes(
        FeatureMatrix(samples), np.arange(support_y.size), support_y,
        np.arange(support_y.size, labels.size), n_classes,
    )
    models = [ClassModel.from_precision(means[k], precisions[k]) for k in range(n_classes)]
    return task, models, query_y


def test_objective_never_increases_and_fixed_point():
    checked = 0
    for seed in range(100):
        dim = 8 + (seed * 7) % 25
        task, models, _ = gaussian_task(seed, dim=dim)
        result = solve(task, models, SolverConfig(lam=1250.0, max_iters=200, rel_tol=1e-9))
        totals = [b.total for b in result.objective_trace]
        assert totals[-1] <= totals[0] + 1e-9
        assert all(b <= a + 1e-9 * max(abs(a), 1.0) for a, b in zip(totals, totals[1:]))
        assert AssignmentMatrix(result.assignments.rows).violations(task) == []

        if result.converged:
            checked += 1
            query_features = task.features.rows(task.query_indices)
            again = assignment_update(query_features, result.centroids, models,
                                      result.proportions, 1250.0, task.n_query)
            assert np.max(np.abs(again - result.query_posteriors)) <= 1e-5
    assert checked >= 80


def test_invariants_hold_at_every_iteration():
    task, models, _ = gaussian_task(11)
    for iters in range(1, 8):
        result = solve(task, models, SolverConfig(max_iters=iters))
        assert result.assignments.violations(task) == []
        np.testing.assert_array_equal(result.assignments.rows[: task.n_support], task.support_labels)
        assert result.proportions.pi.sum() == pytest.approx(1.0, abs=1e-9)


def test_trace_holds_initial_state_plus_iterations():
    task, models, _ = gaussian_task(5)
    result = solve(task, models, SolverConfig(max_iters=3, rel_tol=1e-300))
    assert result.iterations == 3
    assert not result.converged
    assert len(result.objective_trace) == 4
    rows, centroids, _ = initialize(task, models)
    assert result.objective_trace[0].total == pytest.approx(
        total_objective(rows, models, task, 1250.0, centroids).total
    )


def test_solve_is_deterministic():
    task, models, _ = gaussian_task(9)
    first = solve(task, models)
    second = solve(task, models)
    assert first.assignments.rows.tobytes() == second.assignments.rows.tobytes()


def test_softmax_update_beats_simplex_grid():
    rng = np.random.default_rng(3)
    for _ in range(3):
        task, models, _ = gaussian_task(int(rng.integers(1000)), n_classes=3, dim=4, queries=1,
                                        query_classes=[1])
        rows, centroids, proportions = initialize(task, models)
        query_features = task.features.rows(task.query_indices)
        rows[task.query_rows] = assignment_update(query_features, centroids, models,
                                                  proportions, 0.0, task.n_query)
        best_closed_form = total_objective(rows, models, task, 0.0, centroids).total

        grid_best = np.inf
        for a, b in itertools.product(range(101), repeat=2):
            if a + b > 100:
                continue
            rows[-1] = [a / 100, b / 100, (100 - a - b) / 100]
            grid_best = min(grid_best, total_objective(rows, models, task, 0.0, centroids).total)
        assert best_closed_form <= grid_best + 1e-12
        assert grid_best - best_closed_form <= 1e-3


def test_centroid_update_beats_perturbations():
    rng = np.random.default_rng(4)
    task, models, _ = gaussian_task(21, dim=6)
    features = task.sample_features()
    rows, _, _ = initialize(task, models)
    centroids = centroid_update(features, rows)
    best = data_fidelity(rows, models, features, centroids)
    for k in range(task.n_classes):
        for _ in range(200):
            step = rng.standard_normal(centroids.shape[1])
            moved = centroids.copy()
            moved[k] += 1e-3 * step / np.linalg.norm(step)
            assert data_fidelity(rows, models, features, moved) >= best


def test_identity_lambda_zero_single_step_is_soft_nearest_centroid():
    synth = gen_task(n_classes=4, dim=6, shots=5, queries=10, delta=2.0, seed=3)
    task = synth.task
    models = [ClassModel.from_precision(np.zeros(6), np.eye(6) * 3.0) for _ in range(4)]
    cfg = SolverConfig(lam=0.0, max_iters=1, precision_mode="identity", update_centroids=False)
    result = solve(task, models, cfg)

    means = support_means(task)
    queries = task.features.rows(task.query_indices)
    distances = ((queries[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    expected = softmax(-0.5 * distances, axis=1)
    np.testing.assert_allclose(result.query_posteriors, expected, rtol=0, atol=1e-12)


def test_identity_argmax_agrees_with_simpleshot_un():
    synth = gen_task(n_classes=5, dim=8, shots=5, queries=2000, delta=6.0, seed=12)
    task = synth.task
    models = [ClassModel.identity(np.zeros(8)) for _ in range(5)]
    cfg = SolverConfig(lam=0.0, max_iters=1, precision_mode="identity", update_centroids=False)
    transductive = solve(task, models, cfg).predictions()
    inductive = simpleshot(task, "UN")
    assert np.mean(transductive == inductive) >= 0.99


def test_penalty_reduces_predicted_classes():
    task, models, _ = gaussian_task(8, dim=8, queries=15, delta=1.5, query_classes=[0, 1])
    free = solve(task, models, SolverConfig(lam=0.0)).predictions()
    penalized = solve(task, models, SolverConfig(lam=1250.0)).predictions()
    assert np.unique(penalized).size <= np.unique(free).size


def test_floored_log_proportions():
    logs = floored_log_proportions([1.0, 0.0])
    assert np.isfinite(logs).all()
    assert np.exp(logs).sum() == pytest.approx(1.0)


def test_softmax_rows_rejects_non_finite():
    with pytest.raises(NumericalError) as info:
        softmax_rows(np.array([[0.0, 1.0], [np.nan, 0.0]]))
    assert info.value.position == (1, 0)


def test_proportion_update_is_query_mean():
    rows = np.array([[1.0, 0.0], [0.2, 0.8], [0.6, 0.4]])
    np.testing.assert_allclose(proportion_update(rows, [1, 2]).pi, [0.4, 0.6])


def test_model_count_must_match():
    task, models, _ = gaussian_task(2)
    with pytest.raises(DataFormatError, match="class models"):
        solve(task, models[:-1])


@pytest.mark.parametrize("kwargs", [{"lam": -1.0}, {"max_iters": 0}, {"precision_mode": "full"}])
def test_solver_config_validation(kwargs):
    with pytest.raises(DataFormatError):
        SolverConfig(**kwargs)


def test_stops_on_first_small_objective_change():
    for seed in range(10):
        task, models, _ = gaussian_task(seed)
        cfg = SolverConfig(rel_tol=1e-6, max_iters=200)
        result = solve(task, models, cfg)
        totals = [b.total for b in result.objective_trace]
        changes = [relative_change(a, b) for a, b in zip(totals, totals[1:])]
        assert len(changes) == result.iterations
        assert all(change >= cfg.rel_tol for change in changes[:-1])
        assert (changes[-1] < cfg.rel_tol) == result.converged


def test_relative_change_scale():
    assert relative_change(0.5, 0.25) == 0.25
    assert relative_change(-200.0, -202.0) == pytest.approx(0.01)


def test_huge_penalty_collapses_window_to_one_class():
    task, models, _ = gaussian_task(4, n_classes=3, dim=4, queries=5, delta=2.0)
    result = solve(task, models, SolverConfig(lam=1e6 * task.n_query, max_iters=200))
    h_value, _ = partition_entropy(result.assignments.rows, task.query_rows)
    assert h_value < 1e-3


def test_midpoint_query_splits_evenly_without_penalty():
    features = FeatureMatrix(np.array([[-1.0, 0.0], [1.0, 0.0], [0.0, 0.0]]))
    task = FewShotTask.from_classes(features, [0, 1], [0, 1], [2], 2)
    models = [ClassModel.identity([-1.0, 0.0]), ClassModel.identity([1.0, 0.0])]
    result = solve(task, models, SolverConfig(lam=0.0, precision_mode="identity"))
    np.testing.assert_allclose(result.query_posteriors, [[0.5, 0.5]], atol=1e-12)
    assert result.predictions().tolist() == [0]


def test_softmax_rows_ignores_per_row_logit_shift(rng):
    logits = rng.standard_normal((6, 5)) * 10.0
    shift = rng.uniform(-500.0, 500.0, size=(6, 1))
    np.testing.assert_allclose(softmax_rows(logits + shift), softmax_rows(logits), atol=1e-12)
