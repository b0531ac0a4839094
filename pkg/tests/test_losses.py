import numpy as np
import pytest

from sct import tensor as T
from sct.gradcheck import check_gradients
from sct.losses import (
    LabelRangeError,
    LossConfig,
    bag_aggregate,
    grading_loss,
    hybrid_loss,
    masked_binary_loss,
    multiclass_loss,
)
from sct.tensor import Tensor


def test_all_masked_returns_constant_zero():
    logits = Tensor(np.array([0.3, -0.2]), requires_grad=True)
    with T.Tape() as tape:
        loss = masked_binary_loss(logits, np.array([1, 0]), np.array([0, 0]))
    assert float(loss.data) == 0.0
    assert loss.producer is None  # nothing recorded -> zero gradient everywhere
    assert len(tape) == 0 or logits.grad is None


def test_half_probability_loss_is_log_two():
    loss = masked_binary_loss(Tensor(np.zeros(1)), np.array([1]), np.array([1]))
    assert float(loss.data) == pytest.approx(np.log(2.0), abs=1e-12)


def test_masked_loss_equals_element_removal_oracle():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal(8)
    labels = rng.integers(0, 2, 8)
    mask = np.array([1, 0, 1, 1, 0, 1, 0, 1])
    masked = masked_binary_loss(Tensor(logits), labels, mask)
    kept = mask.astype(bool)
    removed = masked_binary_loss(
        Tensor(logits[kept]), labels[kept], np.ones(int(mask.sum()), dtype=int)
    )
    assert abs(float(masked.data) - float(removed.data)) < 1e-12


def test_masked_loss_gradcheck():
    rng = np.random.default_rng(1)
    logits = Tensor(rng.standard_normal(6), requires_grad=True)
    labels = rng.integers(0, 2, 6)
    mask = np.array([1, 1, 0, 1, 0, 1])

    def f():
        return masked_binary_loss(logits, labels, mask)

    errs = check_gradients(f, {"logits": logits})
    assert errs["logits"] < 1e-6


def test_bag_aggregate_zeroes():
    probs = Tensor(np.zeros(3))
    assert float(bag_aggregate(probs, "max").data) == 0.0
    assert float(bag_aggregate(probs, "noisy_or").data) == 0.0


def test_bag_aggregate_max():
    probs = Tensor(np.array([0.2, 0.9, 0.1]))
    assert float(bag_aggregate(probs, "max").data) == pytest.approx(0.9)


def test_bag_aggregate_noisy_or():
    probs = Tensor(np.array([0.5, 0.5]))
    assert float(bag_aggregate(probs, "noisy_or").data) == pytest.approx(0.75)


def test_bag_aggregate_monotone():
    rng = np.random.default_rng(2)
    for mode in ("max", "noisy_or"):
        p = rng.uniform(0.05, 0.95, 5)
        base = float(bag_aggregate(Tensor(p), mode).data)
        for i in range(5):
            bumped = p.copy()
            bumped[i] = min(1.0, bumped[i] + 0.04)
            assert float(bag_aggregate(Tensor(bumped), mode).data) >= base - 1e-12


def test_bag_max_gradient_hits_argmax_only():
    logits = Tensor(np.array([0.2, 1.5, -0.3]), requires_grad=True)
    cfg = LossConfig(w_si=0.0, w_mil=1.0, aggregator="max")
    with T.Tape():
        loss = hybrid_loss(
            {"metastasis": logits},
            {"metastasis": np.array([-1, -1, -1])},
            {"metastasis": 1},
            cfg,
        )
        T.backward(loss)
    assert logits.grad[1] != 0.0
    assert logits.grad[0] == 0.0 and logits.grad[2] == 0.0


def test_hybrid_reduces_to_masked_loss_without_mil():
    rng = np.random.default_rng(3)
    logits = Tensor(rng.standard_normal((4, 1)))
    labels = np.array([1, 0, 1, 1])
    cfg = LossConfig(w_si=1.0, w_mil=0.0)
    hybrid = hybrid_loss(
        {"metastasis": logits}, {"metastasis": labels}, {"metastasis": 1}, cfg
    )
    plain = masked_binary_loss(logits, labels, np.ones(4, dtype=int))
    assert float(hybrid.data) == float(plain.data)


def test_hybrid_composes_published_terms():
    rng = np.random.default_rng(4)
    logits = Tensor(rng.standard_normal((5, 1)))
    labels = np.array([1, -1, 0, -1, 1])
    cfg = LossConfig(w_si=0.7, w_mil=1.3, aggregator="noisy_or")
    got = hybrid_loss(
        {"metastasis": logits}, {"metastasis": labels}, {"metastasis": 1}, cfg
    )
    mask = (labels != -1).astype(int)
    si = masked_binary_loss(logits, np.maximum(labels, 0), mask)
    flat = T.reshape(logits, (5,))
    probs = T.sigmoid(flat)
    bag_p = T.clamp(bag_aggregate(probs, "noisy_or"), cfg.eps, 1 - cfg.eps)
    expected = 0.7 * float(si.data) - 1.3 * float(np.log(bag_p.data))
    assert float(got.data) == pytest.approx(expected, abs=1e-12)


def test_loss_config_validation():
    with pytest.raises(ValueError, match="not both zero"):
        LossConfig(w_si=0.0, w_mil=0.0)
    with pytest.raises(ValueError, match="aggregator"):
        LossConfig(aggregator="vote")


def test_multiclass_uniform_is_log_k():
    logits = Tensor(np.zeros((1, 5)))
    loss = multiclass_loss(logits, np.array([2]), 5)
    assert float(loss.data) == pytest.approx(np.log(5.0), abs=1e-12)


def test_multiclass_confident_correct_is_tiny():
    row = np.full(5, -20.0)
    row[3] = 20.0
    loss = multiclass_loss(Tensor(row[None]), np.array([3]), 5)
    assert float(loss.data) < 1e-3


def test_multiclass_range_check():
    with pytest.raises(LabelRangeError, match="outside"):
        multiclass_loss(Tensor(np.zeros((1, 4))), np.array([4]), 4)


def test_grading_loss_equals_per_task_sum():
    rng = np.random.default_rng(5)
    tasks = (("pfirrmann", 5), ("endplate_defect_upper", 2))
    logits = {
        "pfirrmann": Tensor(rng.standard_normal((6, 5))),
        "endplate_defect_upper": Tensor(rng.standard_normal((6, 1))),
    }
    labels = {
        "pfirrmann": np.array([0, 4, -1, 2, 1, 3]),
        "endplate_defect_upper": np.array([1, -1, 0, 1, 0, -1]),
    }
    total = grading_loss(logits, labels, tasks)
    part1 = multiclass_loss(logits["pfirrmann"], labels["pfirrmann"], 5)
    mask = (labels["endplate_defect_upper"] != -1).astype(int)
    part2 = masked_binary_loss(
        logits["endplate_defect_upper"],
        np.maximum(labels["endplate_defect_upper"], 0),
        mask,
    )
    assert float(total.data) == pytest.approx(
        float(part1.data) + float(part2.data), abs=1e-12
    )


def test_grading_loss_gradcheck():
    rng = np.random.default_rng(6)
    logits5 = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
    logits2 = Tensor(rng.standard_normal((3, 1)), requires_grad=True)
    tasks = (("pfirrmann", 5), ("spondylolisthesis", 2))
    labels = {"pfirrmann": np.array([1, -1, 4]),
              "spondylolisthesis": np.array([0, 1, -1])}

    def f():
        return grading_loss(
            {"pfirrmann": logits5, "spondylolisthesis": logits2}, labels, tasks
        )

    errs = check_gradients(f, {"a": logits5, "b": logits2})
    assert max(errs.values()) < 1e-6
