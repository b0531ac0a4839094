"""ROC AUC and balanced accuracy.

Both return None (an "undefined metric" signal) instead of a number when
the input cannot support the metric, e.g. a single-class label set.
"""

from __future__ import annotations

import numpy as np


def roc_auc(scores, labels):
    """Mann-Whitney AUC with ties counted one-half.

    Equivalent to the trapezoidal area under the ROC built from the sorted
    unique thresholds. None when either class is absent.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} mismatch")
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(len(scores), dtype=np.float64)
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    rank_sum = float(np.sum(ranks[labels == 1]))
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def balanced_accuracy(preds, labels, n_classes):
    """Mean per-class recall over the classes present in ``labels``."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise ValueError(f"preds {preds.shape} and labels {labels.shape} mismatch")
    if labels.size == 0:
        return None
    if np.any((labels < 0) | (labels >= n_classes)):
        raise ValueError(f"labels outside 0..{n_classes - 1}")
    recalls = []
    for k in range(n_classes):
        present = labels == k
        if not np.any(present):
            continue
        recalls.append(float(np.mean(preds[present] == k)))
    return float(np.mean(recalls)) if recalls else None
