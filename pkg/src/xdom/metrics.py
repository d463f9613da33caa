"""Detection metrics with ID as the positive class (higher score = more ID).

Conventions: AUROC counts ties as 1/2; thresholds are inclusive for
positives (``score >= t`` is predicted ID), so ``detect`` flags OOD with a
strict ``score < t``.
"""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .errors import InputError

CONVENTIONS = {
    "positive_class": "in-distribution",
    "auroc_ties": "counted as 1/2",
    "threshold": "score >= t is predicted in-distribution",
    "detect": "1 (OOD) iff score < threshold",
}


def _pair(id_scores, ood_scores):
    a = np.asarray(id_scores, dtype=np.float64).ravel()
    b = np.asarray(ood_scores, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise InputError("both score sets must be non-empty")
    if np.isnan(a).any() or np.isnan(b).any():
        raise InputError("scores contain NaN")
    return a, b


def auroc(id_scores, ood_scores):
    """P(id > ood) + P(id == ood) / 2, via the Mann-Whitney rank sum."""
    a, b = _pair(id_scores, ood_scores)
    ranks = rankdata(np.concatenate([a, b]))
    u = ranks[: a.size].sum() - a.size * (a.size + 1) / 2.0
    return float(u / (a.size * b.size))


def aupr(id_scores, ood_scores):
    """Average precision of the ID class over the descending-score sweep.

    Each distinct score is one threshold; the area is the sum of
    precision times the recall increment at that threshold.
    """
    a, b = _pair(id_scores, ood_scores)
    scores = np.concatenate([a, b])
    positive = np.concatenate([np.ones(a.size), np.zeros(b.size)])
    order = np.argsort(-scores, kind="mergesort")
    scores, positive = scores[order], positive[order]
    last = np.r_[np.flatnonzero(np.diff(scores)), scores.size - 1]
    tp = np.cumsum(positive)[last]
    predicted = last + 1.0
    precision = tp / predicted
    recall_step = np.diff(np.r_[0.0, tp]) / a.size
    return float(np.sum(precision * recall_step))


def tpr_threshold(id_scores, level=0.95):
    """Largest ``t`` with ``mean(id_scores >= t) >= level``."""
    a = np.sort(np.asarray(id_scores, dtype=np.float64).ravel())[::-1]
    if a.size == 0:
        raise InputError("id_scores must be non-empty")
    if not 0 < level <= 1:
        raise InputError("level must lie in (0, 1]")
    counts = np.arange(1, a.size + 1)
    k = int(counts[counts / a.size >= level][0])
    return float(a[k - 1])


def fpr_at_tpr(id_scores, ood_scores, level=0.95):
    """OOD false-positive rate at the threshold keeping ``level`` of ID."""
    a, b = _pair(id_scores, ood_scores)
    t = tpr_threshold(a, level)
    return float(np.mean(b >= t))


def detect(score, threshold):
    """1 (OOD) iff ``score < threshold``, else 0 (ID)."""
    return (np.asarray(score, dtype=np.float64) < threshold).astype(np.int64)


def histogram(scores, bins=30, value_range=None):
    """Equal-width bins over ``[min, max]`` (or ``value_range``)."""
    x = np.asarray(scores, dtype=np.float64).ravel()
    if x.size == 0:
        raise InputError("cannot histogram an empty score set")
    counts, edges = np.histogram(x, bins=bins, range=value_range)
    return edges, counts


def top1_accuracy(logits_or_model, examples, num_classes):
    """Top-1 accuracy over the first K logits; the background logit never wins.

    Accepts either a model (evaluated on ``examples``) or a precomputed
    ``N x (K or K+1)`` logit array.
    """
    K = int(num_classes)
    if hasattr(logits_or_model, "forward_global"):
        from .model import forward_global
        logits = forward_global(logits_or_model, examples.images())
    else:
        logits = np.asarray(logits_or_model)
    labels = examples.labels() if hasattr(examples, "labels") else np.asarray(examples)
    pred = np.asarray(logits)[:, :K].argmax(axis=1)
    return float(np.mean(pred == labels))


def detection_metrics(id_scores, ood_scores, level=0.95):
    return {
        "fpr95": fpr_at_tpr(id_scores, ood_scores, level),
        "auroc": auroc(id_scores, ood_scores),
        "aupr": aupr(id_scores, ood_scores),
    }
