"""Segmentation losses: cross-entropy and the Lovász-softmax IoU surrogate."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import DiffArray


def cross_entropy_loss(logits, labels, ignore_index: int | None = None) -> DiffArray:
    """Mean negative log-softmax at the true class over non-ignored points."""
    logits = ad.asdiff(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ad.ShapeError(
            f"cross_entropy: logits {logits.shape} vs labels {labels.shape}"
        )
    valid = np.arange(labels.shape[0]) if ignore_index is None else np.flatnonzero(labels != ignore_index)
    if valid.size == 0:
        raise ValueError("cross_entropy: every point is ignored")
    picked = labels[valid]
    if picked.min() < 0 or picked.max() >= logits.shape[1]:
        raise ValueError(f"cross_entropy: label outside [0, {logits.shape[1]})")

    # constant max-shift: cancels exactly in the log-softmax, so no gradient path needed
    shift = ad.constant(logits.data.max(axis=1, keepdims=True))
    z = ad.sub(logits, shift)
    lse = ad.log(ad.sum_(ad.exp(z), axis=1, keepdims=True))
    logp = ad.sub(z, lse)
    nll = ad.take_pairs(logp, valid, picked)
    return ad.mul(ad.mean(nll), -1.0)


def _jaccard_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Gradient of the Lovász extension of the Jaccard loss w.r.t. sorted errors."""
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    if gt_sorted.size > 1:
        jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax_loss(probs, labels) -> DiffArray:
    """Lovász-softmax loss averaged over the classes present in ``labels``.

    ``probs`` rows must lie on the probability simplex.  For each present
    class the per-point errors (1-p for members, p otherwise) are sorted
    descending and weighted by the discrete Jaccard-loss gradient; the sort
    permutation is treated as a constant of the graph.
    """
    probs = ad.asdiff(probs)
    labels = np.asarray(labels)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise ad.ShapeError(f"lovasz: probs {probs.shape} vs labels {labels.shape}")
    if probs.shape[0] == 0:
        raise ValueError("lovasz: empty input")
    if np.any(probs.data < -1e-9) or np.abs(probs.data.sum(axis=1) - 1.0).max() > 1e-6:
        raise ValueError("lovasz: rows are not on the probability simplex")

    terms = []
    for c in np.unique(labels):
        fg = (labels == c).astype(probs.data.dtype)
        col = probs[:, int(c)]
        errors = ad.add(ad.constant(fg), ad.mul(col, ad.constant(1.0 - 2.0 * fg)))
        perm = np.argsort(-errors.data, kind="stable")
        weights = _jaccard_grad(fg[perm])
        terms.append(ad.sum_(ad.mul(ad.gather_rows(errors, perm), ad.constant(weights))))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.div(total, float(len(terms)))


def segmentation_loss(logits, labels, ce_weight: float = 1.0, lovasz_weight: float = 1.0,
                      ignore_index: int | None = None) -> DiffArray:
    """Weighted sum of cross-entropy and Lovász-softmax on the same logits."""
    loss = ad.mul(cross_entropy_loss(logits, labels, ignore_index), ce_weight)
    if lovasz_weight != 0.0:
        if ignore_index is not None:
            keep = np.flatnonzero(np.asarray(labels) != ignore_index)
            logits_kept = ad.gather_rows(logits, keep)
            labels_kept = np.asarray(labels)[keep]
        else:
            logits_kept, labels_kept = logits, labels
        lov = lovasz_softmax_loss(ad.softmax(logits_kept, axis=-1), labels_kept)
        loss = ad.add(loss, ad.mul(lov, lovasz_weight))
    return loss
