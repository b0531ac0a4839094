import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sct.metrics import balanced_accuracy, roc_auc


def pair_counting_auc(scores, labels):
    """Brute-force oracle: P(score+ > score-) with ties counted one-half."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        return None
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (pos.size * neg.size)


def recall_oracle(preds, labels, k):
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    recalls = [
        np.mean(preds[labels == c] == c) for c in range(k) if np.any(labels == c)
    ]
    return float(np.mean(recalls)) if recalls else None


def test_perfect_separation_is_one():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0


def test_constant_scores_are_half():
    assert roc_auc([0.5] * 6, [0, 1, 0, 1, 0, 1]) == 0.5


def test_worked_example():
    assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75)


def test_single_class_undefined():
    assert roc_auc([0.1, 0.9], [1, 1]) is None
    assert roc_auc([0.1, 0.9], [0, 0]) is None


def test_auc_matches_pair_counting_on_thousand_cases():
    rng = np.random.default_rng(0)
    checked = 0
    for _ in range(1000):
        n = int(rng.integers(2, 51))
        scores = np.round(rng.standard_normal(n), 1)  # coarse grid forces ties
        labels = rng.integers(0, 2, n)
        expected = pair_counting_auc(scores, labels)
        got = roc_auc(scores, labels)
        if expected is None:
            assert got is None
        else:
            assert abs(got - expected) < 1e-12
            checked += 1
    assert checked > 900


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(-5, 5), min_size=2, max_size=30),
    st.integers(0, 2**31 - 1),
)
def test_auc_invariant_to_monotone_transform(raw_scores, seed):
    rng = np.random.default_rng(seed)
    # snap to a coarse grid so the transform stays injective in float64
    scores = np.round(np.asarray(raw_scores), 2)
    labels = rng.integers(0, 2, len(scores))
    base = roc_auc(scores, labels)
    warped = roc_auc(np.exp(0.5 * scores) + 3.0, labels)
    if base is None:
        assert warped is None
    else:
        assert abs(base - warped) < 1e-12


def test_balanced_accuracy_perfect():
    assert balanced_accuracy([0, 1, 2], [0, 1, 2], 3) == 1.0


def test_balanced_accuracy_majority_collapse():
    assert balanced_accuracy([0, 0, 0, 0], [0, 0, 1, 1], 2) == 0.5


def test_balanced_accuracy_three_class_case():
    # recalls 1.0, 0.5, 0.0 -> 0.5
    assert balanced_accuracy([0, 0, 1, 2, 0, 0], [0, 0, 1, 1, 2, 2], 3) == \
        pytest.approx(0.5)


def test_balanced_accuracy_ignores_absent_classes():
    assert balanced_accuracy([0, 0, 1], [0, 0, 1], 5) == 1.0


def test_balanced_accuracy_empty_undefined():
    assert balanced_accuracy([], [], 3) is None


def test_balanced_accuracy_matches_recall_oracle_on_thousand_cases():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        k = int(rng.integers(2, 6))
        n = int(rng.integers(1, 40))
        labels = rng.integers(0, k, n)
        preds = rng.integers(0, k, n)
        expected = recall_oracle(preds, labels, k)
        got = balanced_accuracy(preds, labels, k)
        assert abs(got - expected) < 1e-12


def test_balanced_accuracy_invariant_to_duplication():
    preds = np.array([0, 1, 1, 0, 1])
    labels = np.array([0, 1, 0, 0, 1])
    base = balanced_accuracy(preds, labels, 2)
    dup_idx = np.concatenate([np.arange(5), np.where(labels == 1)[0]])
    duplicated = balanced_accuracy(preds[dup_idx], labels[dup_idx], 2)
    assert abs(base - duplicated) < 1e-12


def test_label_range_validation():
    with pytest.raises(ValueError, match="outside"):
        balanced_accuracy([0, 1], [0, 3], 2)
