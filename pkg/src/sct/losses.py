"""Masked per-vertebra losses, bag-level MIL terms, and grading losses.

Masked losses assemble per-element terms and sum only the supervised ones,
so a masked-out vertebra's term never enters the graph at all: gradients
with a vertebra masked are bit-for-bit those with its term deleted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .labels import UNKNOWN
from .tensor import Tensor


class LabelRangeError(ValueError):
    """A label lies outside its task's class range."""


@dataclass
class LossConfig:
    w_si: float = 1.0           # single-instance (per-vertebra) weight
    w_mil: float = 1.0          # bag-level weight
    aggregator: str = "max"     # or "noisy_or"
    eps: float = 1e-7           # probability clamp for logs

    def __post_init__(self):
        if self.w_si < 0 or self.w_mil < 0 or (self.w_si == 0 and self.w_mil == 0):
            raise ValueError(f"loss weights must be >= 0 and not both zero: {self}")
        if self.aggregator not in ("max", "noisy_or"):
            raise ValueError(f"unknown bag aggregator {self.aggregator!r}")


def _binary_term(logit, y, eps):
    p = T.clamp(T.sigmoid(logit), eps, 1.0 - eps)
    return T.neg(T.log(p)) if y == 1 else T.neg(T.log(T.sub(T.Tensor(1.0), p)))


def masked_binary_loss(logits, labels, mask, eps=1e-7):
    """Mean sigmoid BCE over mask==1 elements; 0 with no gradient otherwise.

    Terms are built per element in index order so the result is bit-exact
    against a run where masked terms simply do not exist.
    """
    n = int(np.asarray(labels).shape[0])
    flat = T.reshape(logits, (n,)) if logits.data.ndim > 1 else logits
    labels = np.asarray(labels)
    mask = np.asarray(mask)
    total = None
    count = 0
    for i in range(n):
        if not mask[i]:
            continue
        term = _binary_term(flat[(i,)], int(labels[i]), eps)
        total = term if total is None else T.add(total, term)
        count += 1
    if total is None:
        return Tensor(0.0)
    return T.mul(total, 1.0 / count)


def bag_aggregate(probs, mode="max"):
    """Instance probabilities -> bag probability; monotone in every input."""
    n = probs.data.shape[0]
    if mode == "max":
        return probs[(int(np.argmax(probs.data)),)]
    if mode == "noisy_or":
        survive = None
        for i in range(n):
            q = T.sub(T.Tensor(1.0), probs[(i,)])
            survive = q if survive is None else T.mul(survive, q)
        return T.sub(T.Tensor(1.0), survive)
    raise ValueError(f"unknown bag aggregator {mode!r}")


def bag_loss(logits, bag_label, cfg: LossConfig):
    n = int(logits.data.shape[0])
    flat = T.reshape(logits, (n,)) if logits.data.ndim > 1 else logits
    probs = T.sigmoid(flat)
    bag_p = T.clamp(bag_aggregate(probs, cfg.aggregator), cfg.eps, 1.0 - cfg.eps)
    if bag_label == 1:
        return T.neg(T.log(bag_p))
    return T.neg(T.log(T.sub(T.Tensor(1.0), bag_p)))


def hybrid_loss(logits_by_condition, labels_by_condition, bag_labels,
                cfg: LossConfig, conditions=None):
    """Sum over conditions of w_si * masked per-vertebra BCE plus
    w_mil * BCE of the aggregated bag probability. Unknown vertebrae
    contribute only through the bag term."""
    if conditions is None:
        conditions = list(logits_by_condition)
    total = None
    for cond in conditions:
        logits = logits_by_condition[cond]
        labels = np.asarray(labels_by_condition[cond])
        term = None
        if cfg.w_si > 0:
            mask = (labels != UNKNOWN).astype(np.int64)
            si = masked_binary_loss(logits, np.maximum(labels, 0), mask, eps=cfg.eps)
            si = si if cfg.w_si == 1.0 else T.mul(si, cfg.w_si)
            term = si
        if cfg.w_mil > 0:
            mil = bag_loss(logits, int(bag_labels[cond]), cfg)
            mil = mil if cfg.w_mil == 1.0 else T.mul(mil, cfg.w_mil)
            term = mil if term is None else T.add(term, mil)
        total = term if total is None else T.add(total, term)
    return total if total is not None else Tensor(0.0)


def multiclass_loss(logits, labels, n_classes, eps=1e-7):
    """Mean softmax cross-entropy over labelled elements (-1 = missing)."""
    labels = np.asarray(labels)
    bad = labels[(labels != -1) & ((labels < 0) | (labels >= n_classes))]
    if bad.size:
        raise LabelRangeError(
            f"labels {sorted(set(bad.tolist()))} outside 0..{n_classes - 1}"
        )
    probs = T.softmax(logits, axis=-1)
    total = None
    count = 0
    for i in range(labels.shape[0]):
        if labels[i] == -1:
            continue
        p = T.clamp(probs[(i, int(labels[i]))], eps, 1.0)
        term = T.neg(T.log(p))
        total = term if total is None else T.add(total, term)
        count += 1
    if total is None:
        return Tensor(0.0)
    return T.mul(total, 1.0 / count)


def grading_loss(logits_by_task, labels_by_task, tasks, eps=1e-7):
    """Sum over tasks of masked cross-entropy (sigmoid BCE for binary)."""
    total = None
    for name, n_classes in tasks:
        labels = np.asarray(labels_by_task[name])
        if n_classes == 2:
            bad = labels[(labels != -1) & ((labels < 0) | (labels > 1))]
            if bad.size:
                raise LabelRangeError(
                    f"{name}: labels {sorted(set(bad.tolist()))} outside 0..1"
                )
            mask = (labels != -1).astype(np.int64)
            term = masked_binary_loss(
                logits_by_task[name], np.maximum(labels, 0), mask, eps=eps
            )
        else:
            term = multiclass_loss(logits_by_task[name], labels, n_classes, eps=eps)
        total = term if total is None else T.add(total, term)
    return total if total is not None else Tensor(0.0)
