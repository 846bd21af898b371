"""Confusion-matrix bookkeeping, per-class IoU and the mIoU summary.

IoU for class k is TP/(TP+FP+FN) over point counts.  A class with an empty
denominator (never labeled, never predicted) is undefined and excluded from
the mean; mIoU is reported in percent.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class Metrics:
    confusion: np.ndarray       # K x K int64 counts, rows = truth, cols = prediction
    per_class_iou: np.ndarray   # K floats in [0, 1], nan where undefined
    miou: float                 # percent, mean over defined classes

    @property
    def num_points(self) -> int:
        return int(self.confusion.sum())

    @property
    def accuracy(self) -> float:
        total = self.confusion.sum()
        return float(np.trace(self.confusion) / total) if total else float("nan")


def confusion_matrix(labels: np.ndarray, preds: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels).ravel()
    preds = np.asarray(preds).ravel()
    if labels.shape != preds.shape:
        raise ValueError(f"shape mismatch: labels {labels.shape} vs predictions {preds.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels outside [0, {num_classes})")
    if preds.size and (preds.min() < 0 or preds.max() >= num_classes):
        raise ValueError(f"predictions outside [0, {num_classes})")
    flat = labels.astype(np.int64) * num_classes + preds.astype(np.int64)
    return np.bincount(flat, minlength=num_classes * num_classes).reshape(
        num_classes, num_classes
    )


def per_class_iou(confusion: np.ndarray) -> np.ndarray:
    confusion = np.asarray(confusion)
    tp = np.diag(confusion).astype(np.float64)
    fp = confusion.sum(axis=0) - np.diag(confusion)
    fn = confusion.sum(axis=1) - np.diag(confusion)
    denom = tp + fp + fn
    out = np.full(confusion.shape[0], np.nan)
    defined = denom > 0
    out[defined] = tp[defined] / denom[defined]
    return out


def mean_iou(ious) -> float:
    """Mean of the defined per-class IoUs, in percent."""
    ious = np.asarray(ious, dtype=np.float64)
    defined = ~np.isnan(ious)
    if not defined.any():
        raise ValueError("no class has a defined IoU")
    return float(ious[defined].mean() * 100.0)


def metrics_from_confusion(confusion: np.ndarray) -> Metrics:
    ious = per_class_iou(confusion)
    return Metrics(confusion=np.asarray(confusion), per_class_iou=ious, miou=mean_iou(ious))


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return "nan" if np.isnan(x) else f"{x:.6f}"


def append_metrics_csv(path, epoch: int, split: str, loss: float, m: Metrics, class_names) -> None:
    """One row per call: ``epoch,split,loss,miou`` then per-class IoU percents."""
    path = Path(path)
    header = ["epoch", "split", "loss", "miou"] + [f"iou_{name}" for name in class_names]
    write_header = not path.exists()
    with open(path, "a", newline="") as f:
        writer = csv.writer(f)
        if write_header:
            writer.writerow(header)
        row = [epoch, split, _fmt(loss), _fmt(m.miou)]
        row += [_fmt(x * 100.0) for x in m.per_class_iou]
        writer.writerow(row)


def summary_table(m: Metrics, class_names) -> str:
    width = max(len(n) for n in class_names)
    lines = [f"{'class':<{width}}  points   IoU"]
    for k, name in enumerate(class_names):
        iou = m.per_class_iou[k]
        shown = " undef" if np.isnan(iou) else f"{iou * 100.0:6.2f}"
        lines.append(f"{name:<{width}}  {int(m.confusion[k].sum()):6d}  {shown}")
    lines.append(f"{'mIoU':<{width}}  {m.num_points:6d}  {m.miou:6.2f}")
    return "\n".join(lines)
