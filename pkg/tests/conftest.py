import numpy as np

from sct.model import ModelInput, SctConfig, SctModel


def tiny_config(**overrides):
    base = dict(
        embed_dim=16,
        n_transformer_layers=2,
        n_heads=2,
        n_vertebra_levels=8,
        n_sequence_types=4,
        encoder_channels=(4, 8),
        dropout_p=0.5,
        tasks=(("metastasis", 2),),
        slice_size=(8, 8),
    )
    base.update(overrides)
    return SctConfig(**base)


def tiny_model(seed=0, **overrides):
    return SctModel(tiny_config(**overrides), seed=seed)


def make_study(rng, config, n_vert=3, n_chan=2, n_slices=2, present=None):
    h, w = config.slice_size
    level_idx = np.sort(
        rng.choice(config.n_vertebra_levels, size=n_vert, replace=False)
    )
    seq_idx = np.sort(rng.choice(config.n_sequence_types, size=n_chan, replace=False))
    if present is None:
        present = np.ones((n_vert, n_chan), dtype=bool)
    volumes = {
        (v, c): rng.standard_normal((n_slices, h, w))
        for v in range(n_vert)
        for c in range(n_chan)
        if present[v, c]
    }
    return ModelInput(
        level_idx=level_idx, seq_idx=seq_idx, present=present, volumes=volumes
    )
