import numpy as np
import pytest

from segfusion.harness.metrics import (
    append_metrics_csv,
    confusion_matrix,
    mean_iou,
    metrics_from_confusion,
    per_class_iou,
    summary_table,
)


# ---------------------------------------------------------------------------
# confusion matrix
# ---------------------------------------------------------------------------


def test_confusion_counts_against_explicit_loops():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 4, size=1000)
    preds = rng.integers(0, 4, size=1000)
    cm = confusion_matrix(labels, preds, 4)
    want = np.zeros((4, 4), dtype=np.int64)
    for t, p in zip(labels, preds):
        want[t, p] += 1
    np.testing.assert_array_equal(cm, want)
    assert cm.sum() == 1000
    assert cm.dtype == np.int64


def test_confusion_rejects_out_of_range():
    with pytest.raises(ValueError):
        confusion_matrix(np.array([0, 4]), np.array([0, 0]), 4)
    with pytest.raises(ValueError):
        confusion_matrix(np.array([0, 0]), np.array([-1, 0]), 4)
    with pytest.raises(ValueError):
        confusion_matrix(np.array([0, 1]), np.array([0]), 4)


# ---------------------------------------------------------------------------
# IoU
# ---------------------------------------------------------------------------


def test_iou_hand_worked_case():
    # class 0: TP=2, FP=1 (one class-1 point called 0), FN=1 -> 2/4
    # class 1: TP=1, FP=1, FN=1 -> 1/3
    labels = np.array([0, 0, 0, 1, 1])
    preds = np.array([0, 0, 1, 0, 1])
    ious = per_class_iou(confusion_matrix(labels, preds, 2))
    np.testing.assert_allclose(ious, [2 / 4, 1 / 3])


def test_perfect_prediction_scores_100():
    labels = np.arange(6).repeat(10)
    m = metrics_from_confusion(confusion_matrix(labels, labels, 6))
    np.testing.assert_allclose(m.per_class_iou, 1.0)
    assert m.miou == 100.0
    assert m.accuracy == 1.0
    assert m.num_points == 60


def test_mean_iou_is_percent():
    assert mean_iou(np.array([0.5, 1.0])) == 75.0


def test_absent_class_is_excluded_not_zeroed():
    # class 2 never appears in labels or predictions: IoU undefined.
    labels = np.array([0, 0, 1, 1])
    preds = np.array([0, 0, 1, 0])
    ious = per_class_iou(confusion_matrix(labels, preds, 3))
    assert np.isnan(ious[2])
    np.testing.assert_allclose(ious[:2], [2 / 3, 1 / 2])
    assert mean_iou(ious) == pytest.approx((2 / 3 + 1 / 2) / 2 * 100)


def test_all_undefined_is_an_error():
    with pytest.raises(ValueError, match="no class has a defined IoU"):
        mean_iou(np.array([np.nan, np.nan]))


def test_random_predictor_iou_near_theory():
    # For a uniform K-class predictor on balanced labels the expected IoU per
    # class approaches 1/(2K-1): TP ~ N/K^2, FP+FN ~ 2(K-1)N/K^2.
    rng = np.random.default_rng(7)
    k, n = 4, 100_000
    labels = rng.integers(0, k, size=n)
    preds = rng.integers(0, k, size=n)
    ious = per_class_iou(confusion_matrix(labels, preds, k))
    np.testing.assert_allclose(ious, 1 / (2 * k - 1), rtol=0.2)


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------


def test_metrics_csv_append(tmp_path):
    path = tmp_path / "metrics.csv"
    labels = np.array([0, 0, 1, 1])
    m = metrics_from_confusion(confusion_matrix(labels, labels, 2))
    append_metrics_csv(path, 0, "train", 1.25, m, ("road", "car"))
    append_metrics_csv(path, 1, "val", 0.75, m, ("road", "car"))
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "epoch,split,loss,miou,iou_road,iou_car"
    assert len(lines) == 3
    assert lines[1].startswith("0,train,1.250000,100.000000,")
    assert lines[2].startswith("1,val,0.750000,")


def test_metrics_csv_writes_nan_for_undefined(tmp_path):
    path = tmp_path / "metrics.csv"
    labels = np.array([0, 0])
    m = metrics_from_confusion(confusion_matrix(labels, labels, 2))
    append_metrics_csv(path, 0, "train", 0.0, m, ("a", "b"))
    assert ",nan" in path.read_text().strip().splitlines()[1]


def test_summary_table_names_every_class():
    labels = np.array([0, 1, 2, 0])
    m = metrics_from_confusion(confusion_matrix(labels, labels, 3))
    table = summary_table(m, ("ground", "vehicle", "pole"))
    for name in ("ground", "vehicle", "pole", "mIoU"):
        assert name in table
