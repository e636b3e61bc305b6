import numpy as np
import pytest

from wsi_fewshot.baselines import simpleshot
from wsi_fewshot.core import CLASS_PRIORS, validate_task
from wsi_fewshot.errors import DataFormatError
from wsi_fewshot.synth import (
    check_priors,
    gen_slide,
    gen_task,
    gen_window_tasks,
    make_class_bank,
    random_covariance,
)


def test_gen_task_counts_and_validity():
    synth = gen_task(n_classes=4, dim=6, shots=3, queries=7, seed=1)
    task = synth.task
    assert task.n_support == 12
    assert task.n_query == 28
    assert validate_task(task).ok
    np.testing.assert_array_equal(task.shots_per_class(), [3, 3, 3, 3])
    np.testing.assert_array_equal(np.bincount(synth.query_truth), [7, 7, 7, 7])


def test_generators_are_deterministic():
    first = gen_task(seed=5, cov_spec="spd")
    second = gen_task(seed=5, cov_spec="spd")
    assert first.features.values.tobytes() == second.features.values.tobytes()
    np.testing.assert_array_equal(first.query_truth, second.query_truth)

    slide_a = gen_slide(12, 9, seed=2, dim=4)
    slide_b = gen_slide(12, 9, seed=2, dim=4)
    assert slide_a.features.values.tobytes() == slide_b.features.values.tobytes()
    np.testing.assert_array_equal(slide_a.truth, slide_b.truth)
    assert gen_task(seed=6).features.values.tobytes() != first.features.values.tobytes()


def test_features_are_float32_representable():
    values = gen_task(seed=3).features.values
    np.testing.assert_array_equal(values.astype(np.float32).astype(np.float64), values)


def test_class_means_are_orthonormal_directions():
    bank = make_class_bank(4, 10, delta=3.0, seed=0)
    gram = bank.means @ bank.means.T
    np.testing.assert_allclose(gram, 9.0 * np.eye(4), atol=1e-10)


def test_more_classes_than_dimensions_use_unit_directions():
    bank = make_class_bank(5, 2, delta=2.0, seed=0)
    np.testing.assert_allclose(np.linalg.norm(bank.means, axis=1), 2.0)


@pytest.mark.parametrize("spec", ["diagonal", "spd"])
def test_covariance_condition_number(spec):
    rng = np.random.default_rng(0)
    for _ in range(20):
        cov = random_covariance(8, spec, rng)
        np.linalg.cholesky(cov)
        assert np.linalg.cond(cov) <= 100.0 + 1e-6


def test_invalid_specs():
    with pytest.raises(DataFormatError, match="covariance spec"):
        gen_task(cov_spec="toeplitz")
    with pytest.raises(DataFormatError):
        gen_task(n_classes=1)
    with pytest.raises(DataFormatError, match="simplex"):
        gen_slide(4, 4, priors=(0.5, 0.6))
    with pytest.raises(DataFormatError, match="block"):
        gen_slide(4, 4, block=0)


def test_zero_separation_is_chance_level():
    correct, total = 0, 0
    for seed in range(200):
        synth = gen_task(n_classes=5, dim=8, shots=5, queries=2, delta=0.0, seed=seed)
        predictions = simpleshot(synth.task, "UN")
        correct += int(np.sum(predictions == synth.query_truth))
        total += predictions.size
    sigma = np.sqrt(0.2 * 0.8 / total)
    assert abs(correct / total - 0.2) <= 3 * sigma


def test_single_class_prior_gives_single_class_slide():
    slide = gen_slide(10, 10, block=3, priors=(1, 0, 0, 0, 0), dim=3, seed=4)
    assert (slide.truth == 0).all()


def test_slide_class_frequencies_follow_priors():
    slide = gen_slide(200, 200, block=2, priors=CLASS_PRIORS, dim=2, shots=2, seed=8)
    frequencies = np.bincount(slide.truth.ravel(), minlength=5) / slide.truth.size
    np.testing.assert_allclose(frequencies, CLASS_PRIORS, atol=0.03)


def test_blocks_no_smaller_than_window_limit_classes_per_window():
    slide = gen_slide(40, 40, block=5, dim=2, shots=2, seed=9)
    for r in range(0, 36):
        for c in range(0, 36):
            assert np.unique(slide.truth[r:r + 5, c:c + 5]).size <= 4


def test_slide_layout():
    slide = gen_slide(3, 4, block=2, dim=2, shots=2, seed=1)
    grid = slide.grid
    assert slide.support.indices.tolist() == list(range(10))
    np.testing.assert_array_equal(grid.feature_index, 10 + np.arange(12))
    np.testing.assert_array_equal(grid.truth_map(), slide.truth)


def test_window_tasks_are_homogeneous():
    bank = make_class_bank(5, 6, delta=3.0, seed=0)
    tasks = gen_window_tasks(bank, 30, window_size=25, priors=CLASS_PRIORS, seed=3)
    assert len(tasks) == 30
    for synth in tasks:
        assert synth.task.n_query == 25
        assert np.unique(synth.query_truth).size == 1
        assert validate_task(synth.task).ok
    first = tasks[0].task.support_indices
    assert all(np.array_equal(t.task.support_indices, first) for t in tasks)


def test_check_priors():
    np.testing.assert_allclose(check_priors(CLASS_PRIORS), CLASS_PRIORS)
    with pytest.raises(DataFormatError):
        check_priors((-0.1, 1.1))
