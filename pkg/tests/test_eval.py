import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from secc.datagen import ClassPartition, ValidationError
from secc.eval import (MetricsReport, Mode, confusion, evaluate_predictions, office_metrics, predict,
                       predict_labels, project_2d, visda_metrics)
from secc.network import BackboneSpec, init_student

# known {0, 1}; source-unknown 2; target-unknown 3, 4 -> collapsed id 2
PART = ClassPartition((0, 1), frozenset({2}), frozenset({3, 4}))
U = PART.unknown_id


def test_reject_mode_examples():
    assert predict_labels(np.array([0.6, 0.4]), Mode.OPEN_REJECT, 0.5, 2).tolist() == [0]
    assert predict_labels(np.array([0.45, 0.55]), Mode.OPEN_REJECT, 0.6, 2).tolist() == [U]
    p = np.random.default_rng(0).dirichlet(np.ones(2), 50)
    np.testing.assert_array_equal(predict_labels(p, Mode.OPEN_REJECT, 0.0, 2), p.argmax(1))


def test_ties_break_to_lowest_id():
    assert predict_labels(np.array([0.25, 0.25, 0.5, 0.0]), Mode.CLOSED, 0.5, 4).tolist() == [2]
    assert predict_labels(np.array([0.4, 0.4, 0.2]), Mode.OPEN_NCLASS, 0.5, 2).tolist() == [0]


def test_mode_head_mismatch():
    with pytest.raises(ValidationError):
        predict_labels(np.ones((1, 2)) / 2, Mode.OPEN_NCLASS, 0.5, 2)
    with pytest.raises(ValidationError):
        predict_labels(np.ones((1, 3)) / 3, Mode.OPEN_REJECT, 0.5, 2)


def test_predict_single_sample():
    s = init_student(BackboneSpec(input_dim=2, N=3, K=2, hidden_widths=(8,), H=2, D0=2, M=4, D1=2), 0)
    y = predict(s, np.array([0.3, -0.2]), Mode.OPEN_NCLASS, 0.5, 2)
    assert 0 <= y <= 2


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_threshold_monotone_unknown_count(seed):
    p = np.random.default_rng(seed).dirichlet(np.ones(4), 40)
    counts = [(predict_labels(p, Mode.OPEN_REJECT, t, 4) == 4).sum() for t in np.linspace(0, 1, 21)]
    assert all(a <= b for a, b in zip(counts, counts[1:]))


def test_office_examples():
    assert office_metrics([0, 1, U], [0, 1, 3], PART)[:2] == (1.0, 1.0)
    os_, os_star, _ = office_metrics([0, 1, U, 0], [0, 0, 3, 4], PART)
    assert (os_, os_star) == (0.5, 0.5)
    os_, os_star, flags = office_metrics([U, U], [3, 4], PART)
    assert os_ == 1.0 and math.isnan(os_star) and flags
    with pytest.raises(ValidationError):
        office_metrics([], [], PART)


def test_visda_examples():
    knwn, mean, overall, per_class, _ = visda_metrics([0, 1, U], [0, 1, 4], PART)
    assert (knwn, mean, overall) == (1.0, 1.0, 1.0)
    # class 0 all right, class 1 all wrong, unknown all right, equal sizes
    preds, truth = [0, 0, 0, 0, U, U], [0, 0, 1, 1, 3, 4]
    knwn, mean, overall, _, _ = visda_metrics(preds, truth, PART)
    assert knwn == 0.5
    assert mean == pytest.approx(2 / 3, abs=1e-15) and overall == pytest.approx(2 / 3, abs=1e-15)
    closed = ClassPartition((0, 1), frozenset(), frozenset())
    truth = [0] * 10 + [1] * 90
    knwn, mean, overall, _, _ = visda_metrics([0] * 100, truth, closed)
    assert knwn == 0.5 and overall == pytest.approx(0.1, abs=1e-15)


def test_visda_absent_class_is_flagged():
    knwn, _, _, per_class, flags = visda_metrics([0, 0], [0, 0], PART)
    assert 1 not in per_class and "class_1_absent" in flags and knwn == 1.0


def test_confusion_examples():
    np.testing.assert_array_equal(confusion([0, 1, 1], [0, 1, 1], 2), [[1, 0], [0, 2]])
    m = confusion([1], [0], 3)
    assert m[0, 1] == 1 and m.sum() == 1
    with pytest.raises(ValidationError):
        confusion([3], [0], 3)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_report_invariants_fuzz(seed):
    rng = np.random.default_rng(seed)
    truth = rng.choice([0, 1, 3, 4], 60)
    preds = rng.integers(0, 3, 60)
    r = evaluate_predictions(preds, truth, PART)
    collapsed = PART.eval_label(truth)
    np.testing.assert_array_equal(r.confusion.sum(1), np.bincount(collapsed, minlength=3))
    assert r.overall == pytest.approx(np.trace(r.confusion) / 60, abs=1e-15)
    assert r.os == r.overall
    perm = rng.permutation(60)
    r2 = evaluate_predictions(preds[perm], truth[perm], PART)
    assert r2.scalars() == pytest.approx(r.scalars(), abs=1e-15)
    for v in (r.os, r.os_star, r.knwn, r.mean, r.overall):
        assert 0.0 <= v <= 1.0


def test_closed_set_os_equals_overall():
    closed = ClassPartition((0, 1, 2), frozenset(), frozenset())
    rng = np.random.default_rng(4)
    truth, preds = rng.integers(0, 3, 30), rng.integers(0, 3, 30)
    r = evaluate_predictions(preds, truth, closed)
    assert r.os == r.os_star == r.overall


def test_metrics_csv_round_trip(tmp_path):
    r = evaluate_predictions([0, 0, U, 1], [0, 1, 3, 1], PART)
    r.save(tmp_path / "m.csv")
    back = MetricsReport.load(tmp_path / "m.csv")
    assert back.scalars() == r.scalars() and back.per_class == r.per_class
    np.testing.assert_array_equal(back.confusion, r.confusion)
    nan_report = evaluate_predictions([U], [3], PART)
    back = MetricsReport.from_csv(nan_report.to_csv())
    assert math.isnan(back.os_star) and back.flags == nan_report.flags


def test_project_axis_aligned():
    rng = np.random.default_rng(0)
    a, b = rng.normal(0, 3, 50), rng.normal(0, 1, 50)
    a, b = a - a.mean(), b - b.mean()
    b -= (b @ a) / (a @ a) * a  # centered and uncorrelated, so the PCA axes are the coordinate axes
    x = np.column_stack([a, b]) + np.array([2.0, -1.0])
    xc = x - x.mean(0)
    proj = project_2d(x)
    for j in range(2):
        assert min(np.abs(proj[:, j] - xc[:, j]).max(), np.abs(proj[:, j] + xc[:, j]).max()) < 1e-9


def test_project_duplicates_and_constant():
    x = np.random.default_rng(1).normal(size=(10, 5))
    proj = project_2d(np.vstack([x, x]))
    np.testing.assert_allclose(proj[:10], proj[10:], atol=1e-12)
    np.testing.assert_array_equal(project_2d(np.ones((4, 3))), np.zeros((4, 2)))
    with pytest.raises(ValidationError):
        project_2d(np.ones((1, 3)))


def test_project_rank_two_captures_all_variance():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(40, 2)) @ rng.normal(size=(2, 6)) + rng.normal(size=6)
    xc = x - x.mean(0)
    proj = project_2d(x)
    # eigendecomposition oracle: top-2 eigenvalues hold all of the variance
    vals = np.linalg.eigvalsh(xc.T @ xc)
    assert (proj ** 2).sum() / (xc ** 2).sum() == pytest.approx(1.0, abs=1e-9)
    assert (proj ** 2).sum() == pytest.approx(vals[-2:].sum(), rel=1e-9)


def test_project_sign_convention():
    x = np.random.default_rng(3).normal(size=(30, 4))
    a, b = project_2d(x), project_2d(-x)
    # flipping the data flips the scores, not the loading signs
    np.testing.assert_allclose(a, -b, atol=1e-10)
