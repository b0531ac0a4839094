import numpy as np
import pytest

from sct.optim import Adam, AdamConfig
from sct.tensor import Tensor


def test_defaults_match_published_hyperparameters():
    cfg = AdamConfig()
    assert cfg.lr == 1e-4
    assert (cfg.beta1, cfg.beta2) == (0.9, 0.999)
    assert cfg.eps == 1e-8


def test_zero_gradients_leave_parameters_unchanged():
    p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    opt = Adam({"p": p})
    before = p.data.copy()
    for _ in range(3):
        p.grad = np.zeros(3)
        opt.step()
    np.testing.assert_array_equal(p.data, before)


def test_first_step_matches_closed_form():
    # fresh state, g = 1 everywhere: m_hat = 1, v_hat = 1,
    # delta = -lr * 1 / (1 + eps)
    cfg = AdamConfig(lr=1e-4)
    p = Tensor(np.zeros(4), requires_grad=True)
    opt = Adam({"p": p}, cfg)
    p.grad = np.ones(4)
    opt.step()
    expected = -cfg.lr / (1.0 + cfg.eps)
    np.testing.assert_allclose(p.data, np.full(4, expected), rtol=1e-12)


def test_bias_corrected_sequence_matches_reference():
    # independent recomputation of two steps with arbitrary gradients
    cfg = AdamConfig(lr=0.01)
    p = Tensor(np.array([0.5]), requires_grad=True)
    opt = Adam({"p": p}, cfg)
    grads = [np.array([0.3]), np.array([-0.7])]

    ref = 0.5
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = cfg.beta1 * m + (1 - cfg.beta1) * g[0]
        v = cfg.beta2 * v + (1 - cfg.beta2) * g[0] ** 2
        mhat = m / (1 - cfg.beta1**t)
        vhat = v / (1 - cfg.beta2**t)
        ref -= cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)

    for g in grads:
        p.grad = g.copy()
        opt.step()
        p.zero_grad()
    assert float(p.data[0]) == pytest.approx(ref, abs=1e-15)


def test_moment_shapes_match_parameters():
    p1 = Tensor(np.zeros((2, 3)), requires_grad=True)
    p2 = Tensor(np.zeros(5), requires_grad=True)
    opt = Adam({"a": p1, "b": p2})
    assert opt.m["a"].shape == (2, 3)
    assert opt.v["b"].shape == (5,)
    assert opt.step_count == 0
