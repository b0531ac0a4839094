"""Central finite-difference gradient checking.

The independent oracle for every differentiable op and for whole models:
perturb each scalar by +-h with the tape off, compare the quotient against
the recorded gradient.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tape, Tensor, backward


def relative_error(g_ad, g_fd):
    """Elementwise |ad - fd| / max(1, |ad|, |fd|), reduced to the max."""
    g_ad = np.asarray(g_ad, dtype=np.float64)
    g_fd = np.asarray(g_fd, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(g_ad), np.abs(g_fd)))
    if g_ad.size == 0:
        return 0.0
    return float(np.max(np.abs(g_ad - g_fd) / denom))


def numerical_gradient(f, x: Tensor, h=1e-5):
    """d f() / d x by central differences; f is re-run with the tape off."""
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(f().data)
        flat[i] = orig - h
        down = float(f().data)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def check_gradients(f, params, h=1e-5):
    """Compare tape gradients of scalar ``f()`` against finite differences.

    ``params`` maps names to leaf tensors that f closes over. Returns
    {name: max relative error}.
    """
    for p in params.values():
        p.zero_grad()
    with Tape():
        loss = f()
        backward(loss)
    errors = {}
    for name, p in params.items():
        g_ad = p.grad if p.grad is not None else np.zeros_like(p.data)
        g_fd = numerical_gradient(f, p, h=h)
        errors[name] = relative_error(g_ad, g_fd)
    return errors


def gradcheck_model(config=None, seed=0, n_vert=2, n_chan=2, n_slices=2, h=1e-5):
    """Finite-difference check of every parameter block of a full model.

    Builds a model on a random study, differentiates the hybrid loss (smooth
    noisy-or aggregator so the oracle sees no kinks), and returns
    {block name: max relative error}.
    """
    from .losses import LossConfig, hybrid_loss
    from .model import ModelInput, SctConfig, SctModel

    if config is None:
        config = SctConfig(
            embed_dim=16,
            n_transformer_layers=2,
            n_heads=2,
            n_vertebra_levels=6,
            n_sequence_types=2,
            encoder_channels=(4, 8),
            dropout_p=0.5,
            tasks=(("metastasis", 2), ("fracture", 2), ("compression", 2)),
            slice_size=(8, 8),
        )
    model = SctModel(config, seed=seed)
    rng = np.random.default_rng(seed + 1)
    h_px, w_px = config.slice_size
    n_chan = min(n_chan, config.n_sequence_types)
    study = ModelInput(
        level_idx=np.sort(
            rng.choice(config.n_vertebra_levels, size=n_vert, replace=False)
        ),
        seq_idx=np.arange(n_chan, dtype=np.intp),
        present=np.ones((n_vert, n_chan), dtype=bool),
        volumes={
            (v, c): rng.standard_normal((n_slices, h_px, w_px))
            for v in range(n_vert)
            for c in range(n_chan)
        },
    )
    conditions = [name for name, _ in config.tasks]
    labels = {
        name: rng.choice([-1, 0, 1], size=n_vert, p=[0.25, 0.375, 0.375])
        for name in conditions
    }
    bags = {name: int(rng.integers(0, 2)) for name in conditions}
    loss_cfg = LossConfig(aggregator="noisy_or")

    def f():
        out = model.forward(study, train=False)
        return hybrid_loss(out.logits, labels, bags, loss_cfg, conditions)

    return check_gradients(f, model.named_parameters(), h=h)
