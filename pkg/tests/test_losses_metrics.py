import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import central_diff, lovasz_oracle, rel_err, softmax_rows
from stela.losses_metrics import (
    ClassTable,
    ConfusionMatrix,
    LabelDataError,
    UndefinedMetricError,
    accumulate_confusion,
    inverse_log_frequency,
    lovasz_grad,
    lovasz_softmax,
    miou,
    softmax,
    weighted_cross_entropy,
    write_metrics_csv,
)


def test_ce_uniform_logits_is_log_c():
    loss, _ = weighted_cross_entropy(np.zeros((3, 4)), np.array([0, 1, 3]), ClassTable(4))
    assert loss == pytest.approx(math.log(4), abs=1e-15)


def test_ce_weights_and_ignore():
    table = ClassTable(2, weights=[2.0, 1.0])
    logits = np.array([[0.0, 0.0], [5.0, -5.0], [0.0, 3.0]])
    loss, grad = weighted_cross_entropy(logits, np.array([0, 255, 0]), table)
    # mean over the two valid rows of 2 * -log p0
    expected = (2 * math.log(2) + 2 * math.log(1 + math.exp(3))) / 2
    assert loss == pytest.approx(expected, abs=1e-14)
    assert np.all(grad[1] == 0)


def test_ce_all_ignored():
    loss, grad = weighted_cross_entropy(np.ones((2, 3)), np.array([255, 255]), ClassTable(3))
    assert loss == 0.0 and np.all(grad == 0)


def test_ce_rejects_bad_labels():
    with pytest.raises(LabelDataError):
        weighted_cross_entropy(np.zeros((1, 3)), np.array([3]), ClassTable(3))


@pytest.mark.parametrize("seed", range(5))
def test_ce_gradient(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(8, 5))
    targets = rng.integers(0, 5, 8)
    targets[0] = 255
    table = ClassTable(5, weights=rng.uniform(0.5, 2, 5))
    _, grad = weighted_cross_entropy(logits, targets, table)
    numeric = central_diff(lambda: weighted_cross_entropy(logits, targets, table)[0], logits)
    assert rel_err(grad, numeric).max() < 1e-6


def test_lovasz_grad_hand_values():
    np.testing.assert_allclose(lovasz_grad([1.0, 0.0, 1.0]), [0.5, 1 / 6, 1 / 3], atol=1e-15)


def test_lovasz_perfect_and_worst():
    table = ClassTable(2)
    targets = np.array([0, 1, 1])
    perfect = np.eye(2)[targets]
    assert lovasz_softmax(perfect, targets, table)[0] == 0.0
    worst = np.eye(2)[1 - targets]
    assert lovasz_softmax(worst, targets, table)[0] == pytest.approx(1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_lovasz_matches_set_function_oracle(seed):
    rng = np.random.default_rng(seed)
    n, c = int(rng.integers(1, 12)), int(rng.integers(2, 5))
    probs = softmax_rows(rng.normal(size=(n, c)))
    targets = rng.integers(0, c, n)
    targets[rng.random(n) < 0.2] = 255
    loss, _ = lovasz_softmax(probs, targets, ClassTable(c))
    assert loss == pytest.approx(lovasz_oracle(probs, targets.tolist(), c), abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_lovasz_gradient(seed):
    rng = np.random.default_rng(seed)
    probs = softmax_rows(rng.normal(size=(10, 4)))
    targets = rng.integers(0, 4, 10)
    table = ClassTable(4)
    _, grad = lovasz_softmax(probs, targets, table)
    numeric = central_diff(lambda: lovasz_softmax(probs, targets, table)[0], probs, h=1e-7)
    assert rel_err(grad, numeric).max() < 1e-5


def test_softmax_rows_sum_to_one(rng):
    np.testing.assert_allclose(softmax(rng.normal(scale=30, size=(50, 7))).sum(axis=1), 1.0, atol=1e-12)


def test_inverse_log_frequency():
    w = inverse_log_frequency(np.array([90, 10, 0]))
    np.testing.assert_allclose(w, [1 / math.log(1.92), 1 / math.log(1.12), 1 / math.log(1.02)])
    assert w[2] > w[1] > w[0]


def test_miou_hand_value():
    # class 0: TP=5, FP=3, FN=2
    cm = ConfusionMatrix(np.array([[5, 2], [3, 0]]))
    per_class, mean = miou(cm)
    assert per_class[0] == pytest.approx(0.5)
    assert per_class[1] == 0.0
    assert mean == pytest.approx(0.25)


def test_miou_skips_absent_classes():
    cm = accumulate_confusion(np.array([0, 0, 1]), np.array([0, 0, 1]), ClassTable(3))
    per_class, mean = miou(cm)
    assert np.isnan(per_class[2])
    assert mean == 1.0


def test_miou_undefined():
    with pytest.raises(UndefinedMetricError):
        miou(ConfusionMatrix.zeros(3))


def test_confusion_ignores_void_and_accumulates():
    table = ClassTable(2)
    a = accumulate_confusion(np.array([0, 1, 1]), np.array([0, 255, 0]), table)
    np.testing.assert_array_equal(a.counts, [[1, 1], [0, 0]])
    b = accumulate_confusion(np.array([1]), np.array([1]), table, acc=a)
    assert b.total == 3
    assert (a + a).total == 4
    with pytest.raises(LabelDataError):
        accumulate_confusion(np.array([2]), np.array([0]), table)
    with pytest.raises(LabelDataError):
        accumulate_confusion(np.array([0]), np.array([7]), table)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=60))
def test_miou_in_unit_interval(pairs):
    pred, truth = np.array(pairs).T
    per_class, mean = miou(accumulate_confusion(pred, truth, ClassTable(4)))
    finite = per_class[~np.isnan(per_class)]
    assert np.all((finite >= 0) & (finite <= 1))
    assert 0 <= mean <= 1


def test_write_metrics_csv(tmp_path):
    write_metrics_csv(tmp_path / "m.csv", np.array([0.5, np.nan]), 0.5, ["a", "b"])
    assert (tmp_path / "m.csv").read_text().splitlines() == ["class,iou", "a,0.5", "b,", "mean,0.5"]
