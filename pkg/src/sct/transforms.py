"""Volume normalization, train-time augmentation, and sequence dropping."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np


def normalize_volume(raw) -> np.ndarray:
    """Subtract the volume mean and divide by (std + 1e-6), in float64."""
    vol = np.asarray(raw, dtype=np.float64)
    return (vol - vol.mean()) / (vol.std() + 1e-6)


@dataclass
class AugmentConfig:
    rotation_deg: float = 15.0
    translate_px: float = 32.0
    scale_frac: float = 0.10
    intensity_frac: float = 0.10


def warp_volume(vol, rotation_deg, translate, scale):
    """Apply one affine (rotation about center, translation, scale) to every
    slice with bilinear resampling and zero fill. Identity parameters
    reproduce the input bit-exactly."""
    vol = np.asarray(vol, dtype=np.float64)
    _, h, w = vol.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ty, tx = translate
    theta = np.deg2rad(rotation_deg)
    cos_t, sin_t = np.cos(theta), np.sin(theta)

    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    dy = ys - cy - ty
    dx = xs - cx - tx
    # inverse map: undo translation, rotation, then scale
    sy = (cos_t * dy + sin_t * dx) / scale + cy
    sx = (-sin_t * dy + cos_t * dx) / scale + cx

    y0 = np.floor(sy).astype(np.intp)
    x0 = np.floor(sx).astype(np.intp)
    fy = sy - y0
    fx = sx - x0

    out = np.zeros_like(vol)
    for oy, ox, weight in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        yy = y0 + oy
        xx = x0 + ox
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        yc = np.clip(yy, 0, h - 1)
        xc = np.clip(xx, 0, w - 1)
        out += (weight * valid)[None] * vol[:, yc, xc]
    return out


def augment_volume(vol, rng, cfg: AugmentConfig) -> np.ndarray:
    """Random per-volume affine plus intensity gain; one parameter draw is
    shared by all slices of the volume."""
    rotation = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)
    ty = rng.uniform(-cfg.translate_px, cfg.translate_px)
    tx = rng.uniform(-cfg.translate_px, cfg.translate_px)
    scale = rng.uniform(1.0 - cfg.scale_frac, 1.0 + cfg.scale_frac)
    gain = rng.uniform(1.0 - cfg.intensity_frac, 1.0 + cfg.intensity_frac)
    return warp_volume(vol, rotation, (ty, tx), scale) * gain


def augment_study(study, rng, cfg: AugmentConfig):
    """Augment every volume of a study; labels and shapes are untouched."""
    out = copy.copy(study)
    out.volumes = {
        key: augment_volume(vol, rng, cfg) for key, vol in study.volumes.items()
    }
    return out


def sequence_drop(study, rng, p_single=0.4, p_all=0.1):
    """Per vertebra, mark one uniformly-chosen sequence absent with
    probability ``p_single`` or all sequences absent with ``p_all``; labels
    are untouched so supervision forces context-based prediction."""
    n_chan = len(study.seq_idx)
    if n_chan < 2:
        raise ValueError("sequence_drop needs at least 2 sequence types")
    present = study.present.copy()
    for v in range(len(study.level_idx)):
        r = rng.random()
        if r < p_single:
            present[v, int(rng.integers(n_chan))] = False
        elif r < p_single + p_all:
            present[v, :] = False
    out = copy.copy(study)
    out.present = present
    return out
