"""Spine context model.

Each vertebra volume is encoded slice-by-slice by a shared 2-d residual
CNN, slices are pooled by attention into one feature per (vertebra,
sequence), level/sequence embeddings are added, a small transformer
exchanges context across all tokens, each vertebra's sequence tokens are
pooled by channel-wise attention, and linear heads emit per-task logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    """Model configuration violates an invariant."""


class ContractError(RuntimeError):
    """An operation was called outside its contract (e.g. empty study)."""


CANCER_TASKS = (("metastasis", 2), ("fracture", 2), ("compression", 2))

GRADING_TASKS = (
    ("pfirrmann", 5),
    ("disc_narrowing", 4),
    ("central_canal_stenosis", 2),
    ("spondylolisthesis", 2),
    ("endplate_defect_upper", 2),
    ("endplate_defect_lower", 2),
    ("marrow_change_upper", 2),
    ("marrow_change_lower", 2),
)


def n_logits(n_classes: int) -> int:
    """Binary tasks emit one sigmoid logit; k-class tasks emit k logits."""
    return 1 if n_classes == 2 else n_classes


@dataclass
class SctConfig:
    embed_dim: int = 128
    n_transformer_layers: int = 2
    n_heads: int = 4
    ff_dim: int | None = None  # defaults to 2 * embed_dim
    n_vertebra_levels: int = 24
    n_sequence_types: int = 2
    encoder_channels: tuple = (16, 32, 64, 128)
    dropout_p: float = 0.5
    tasks: tuple = CANCER_TASKS
    slice_size: tuple = (112, 112)
    drop_missing_tokens: bool = False

    def __post_init__(self):
        if self.ff_dim is None:
            self.ff_dim = 2 * self.embed_dim
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        self.slice_size = tuple(int(s) for s in self.slice_size)
        self.tasks = tuple((str(n), int(k)) for n, k in self.tasks)
        counts = (
            self.embed_dim, self.n_transformer_layers, self.n_heads, self.ff_dim,
            self.n_vertebra_levels, self.n_sequence_types, len(self.encoder_channels),
            len(self.tasks), *self.slice_size, *self.encoder_channels,
        )
        if any(c < 1 for c in counts):
            raise ConfigError(f"all config counts must be >= 1: {self}")
        if self.embed_dim % self.n_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}"
            )
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1): {self.dropout_p}")
        for name, k in self.tasks:
            if k < 2:
                raise ConfigError(f"task {name!r} needs >= 2 classes, got {k}")

    def to_dict(self):
        return {
            "embed_dim": self.embed_dim,
            "n_transformer_layers": self.n_transformer_layers,
            "n_heads": self.n_heads,
            "ff_dim": self.ff_dim,
            "n_vertebra_levels": self.n_vertebra_levels,
            "n_sequence_types": self.n_sequence_types,
            "encoder_channels": list(self.encoder_channels),
            "dropout_p": self.dropout_p,
            "tasks": [list(t) for t in self.tasks],
            "slice_size": list(self.slice_size),
            "drop_missing_tokens": self.drop_missing_tokens,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            embed_dim=d["embed_dim"],
            n_transformer_layers=d["n_transformer_layers"],
            n_heads=d["n_heads"],
            ff_dim=d["ff_dim"],
            n_vertebra_levels=d["n_vertebra_levels"],
            n_sequence_types=d["n_sequence_types"],
            encoder_channels=tuple(d["encoder_channels"]),
            dropout_p=d["dropout_p"],
            tasks=tuple(tuple(t) for t in d["tasks"]),
            slice_size=tuple(d["slice_size"]),
            drop_missing_tokens=d["drop_missing_tokens"],
        )


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Linear:
    def __init__(self, n_in, n_out, rng):
        scale = 1.0 / np.sqrt(n_in)
        self.weight = Tensor(rng.normal(0.0, scale, (n_in, n_out)), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True)
        self.n_in, self.n_out = n_in, n_out

    def __call__(self, x):
        lead = x.data.shape[:-1]
        flat = T.reshape(x, (-1, self.n_in))
        y = T.matmul(flat, self.weight)
        y = T.add(y, T.broadcast_to(self.bias, y.data.shape))
        return T.reshape(y, lead + (self.n_out,))

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]


class LayerNorm:
    def __init__(self, dim, eps=1e-5):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x):
        return T.layer_normalize(x, self.gain, self.bias, eps=self.eps)

    def params(self):
        return [("gain", self.gain), ("bias", self.bias)]


class ChannelNorm(LayerNorm):
    """Layer normalization over channels at each spatial position."""

    def __call__(self, x):
        moved = T.transpose(x, (0, 2, 3, 1))
        normed = T.layer_normalize(moved, self.gain, self.bias, eps=self.eps)
        return T.transpose(normed, (0, 3, 1, 2))


class Conv:
    def __init__(self, c_in, c_out, k, stride, padding, rng):
        scale = np.sqrt(2.0 / (c_in * k * k))
        self.weight = Tensor(
            rng.normal(0.0, scale, (c_out, c_in, k, k)), requires_grad=True
        )
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)
        self.stride, self.padding = stride, padding

    def __call__(self, x):
        return T.conv2d(x, self.weight, bias=self.bias,
                        stride=self.stride, padding=self.padding)

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]


class ResidualStage:
    """Stride-2 downsample followed by a two-conv residual block."""

    def __init__(self, c_in, c_out, rng):
        self.down = Conv(c_in, c_out, 3, 2, 1, rng)
        self.norm_down = ChannelNorm(c_out)
        self.conv1 = Conv(c_out, c_out, 3, 1, 1, rng)
        self.norm1 = ChannelNorm(c_out)
        self.conv2 = Conv(c_out, c_out, 3, 1, 1, rng)
        self.norm2 = ChannelNorm(c_out)

    def __call__(self, x):
        y = T.silu(self.norm_down(self.down(x)))
        h = T.silu(self.norm1(self.conv1(y)))
        h = self.norm2(self.conv2(h))
        return T.silu(T.add(y, h))

    def params(self):
        out = []
        for sub, layer in (("down", self.down), ("norm_down", self.norm_down),
                           ("conv1", self.conv1), ("norm1", self.norm1),
                           ("conv2", self.conv2), ("norm2", self.norm2)):
            out.extend((f"{sub}.{n}", p) for n, p in layer.params())
        return out


class SliceEncoder:
    """Shared single-channel 2-d CNN applied to every slice independently."""

    def __init__(self, channels, embed_dim, rng):
        self.stem = Conv(1, channels[0], 3, 1, 1, rng)
        self.norm_stem = ChannelNorm(channels[0])
        self.stages = []
        prev = channels[0]
        for ch in channels:
            self.stages.append(ResidualStage(prev, ch, rng))
            prev = ch
        self.proj = Linear(prev, embed_dim, rng)

    def __call__(self, x):
        """[B,1,H,W] -> [B,E] via stages, global average pool, projection."""
        y = T.silu(self.norm_stem(self.stem(x)))
        for stage in self.stages:
            y = stage(y)
        b, c, h, w = y.data.shape
        pooled = T.tmean(T.reshape(y, (b, c, h * w)), axis=2)
        return self.proj(pooled)

    def params(self):
        out = [("stem." + n, p) for n, p in self.stem.params()]
        out += [("norm_stem." + n, p) for n, p in self.norm_stem.params()]
        for i, stage in enumerate(self.stages):
            out += [(f"stage{i}.{n}", p) for n, p in stage.params()]
        out += [("proj." + n, p) for n, p in self.proj.params()]
        return out


class MultiHeadAttention:
    """Scaled dot-product self-attention over the full token set (no mask)."""

    def __init__(self, embed_dim, n_heads, rng):
        if embed_dim % n_heads != 0:
            raise ConfigError(f"embed_dim {embed_dim} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.head_dim = embed_dim // n_heads
        self.wq = Linear(embed_dim, embed_dim, rng)
        self.wk = Linear(embed_dim, embed_dim, rng)
        self.wv = Linear(embed_dim, embed_dim, rng)
        self.wo = Linear(embed_dim, embed_dim, rng)

    def __call__(self, x):
        n_tok = x.data.shape[0]
        h, d = self.n_heads, self.head_dim

        def split(t):
            return T.transpose(T.reshape(t, (n_tok, h, d)), (1, 0, 2))

        q, k, v = split(self.wq(x)), split(self.wk(x)), split(self.wv(x))
        scores = T.mul(T.bmm(q, T.transpose(k, (0, 2, 1))), T.Tensor(1.0 / np.sqrt(d)))
        att = T.softmax(scores, axis=-1)
        mixed = T.bmm(att, v)
        joined = T.reshape(T.transpose(mixed, (1, 0, 2)), (n_tok, h * d))
        return self.wo(joined), att.data

    def params(self):
        out = []
        for sub, layer in (("wq", self.wq), ("wk", self.wk),
                           ("wv", self.wv), ("wo", self.wo)):
            out.extend((f"{sub}.{n}", p) for n, p in layer.params())
        return out


def multi_head_attention(tokens, attention: MultiHeadAttention):
    """Bare attention op; returns (output tokens, per-head attention rows)."""
    return attention(tokens)


class TransformerLayer:
    """Pre-norm encoder layer: attention and feed-forward with residuals."""

    def __init__(self, embed_dim, n_heads, ff_dim, rng):
        self.norm_attn = LayerNorm(embed_dim)
        self.attn = MultiHeadAttention(embed_dim, n_heads, rng)
        self.norm_ff = LayerNorm(embed_dim)
        self.ff1 = Linear(embed_dim, ff_dim, rng)
        self.ff2 = Linear(ff_dim, embed_dim, rng)

    def __call__(self, x, dropout_p=0.0, rng=None):
        a, att = self.attn(self.norm_attn(x))
        if dropout_p > 0.0:
            a = T.dropout(a, dropout_p, rng)
        x = T.add(x, a)
        hfwd = self.ff2(T.silu(self.ff1(self.norm_ff(x))))
        if dropout_p > 0.0:
            hfwd = T.dropout(hfwd, dropout_p, rng)
        return T.add(x, hfwd), att

    def params(self):
        out = [("norm_attn." + n, p) for n, p in self.norm_attn.params()]
        out += [("attn." + n, p) for n, p in self.attn.params()]
        out += [("norm_ff." + n, p) for n, p in self.norm_ff.params()]
        out += [("ff1." + n, p) for n, p in self.ff1.params()]
        out += [("ff2." + n, p) for n, p in self.ff2.params()]
        return out


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------


@dataclass
class SctOutput:
    logits: dict                       # task -> Tensor [N, n_logits]
    slice_weights: dict                # (vertebra, channel) -> np [S]
    sequence_weights: np.ndarray | None  # [N, C, E] pooling weights
    n_vertebrae: int = 0
    n_channels: int = 0


class SctModel:
    """All parameters plus the forward pass over one study."""

    def __init__(self, config: SctConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        cfg = config
        self.encoder = SliceEncoder(cfg.encoder_channels, cfg.embed_dim, rng)
        self.slice_scorer = Linear(cfg.embed_dim, 1, rng)
        self.level_embedder = Linear(cfg.n_vertebra_levels, cfg.embed_dim, rng)
        self.sequence_embedder = Linear(cfg.n_sequence_types, cfg.embed_dim, rng)
        self.missing_feature = Tensor(
            rng.normal(0.0, 1.0 / np.sqrt(cfg.embed_dim), cfg.embed_dim),
            requires_grad=True,
        )
        self.layers = [
            TransformerLayer(cfg.embed_dim, cfg.n_heads, cfg.ff_dim, rng)
            for _ in range(cfg.n_transformer_layers)
        ]
        self.final_norm = LayerNorm(cfg.embed_dim)
        self.sequence_scorer = Linear(cfg.embed_dim, cfg.embed_dim, rng)
        self.heads = {
            name: Linear(cfg.embed_dim, n_logits(k), rng) for name, k in cfg.tasks
        }

    # -- parameter registry -------------------------------------------------

    def named_parameters(self):
        out = {}
        for n, p in self.encoder.params():
            out[f"encoder.{n}"] = p
        for n, p in self.slice_scorer.params():
            out[f"slice_scorer.{n}"] = p
        for n, p in self.level_embedder.params():
            out[f"level_embedder.{n}"] = p
        for n, p in self.sequence_embedder.params():
            out[f"sequence_embedder.{n}"] = p
        out["missing_feature"] = self.missing_feature
        for i, layer in enumerate(self.layers):
            for n, p in layer.params():
                out[f"transformer.{i}.{n}"] = p
        for n, p in self.final_norm.params():
            out[f"final_norm.{n}"] = p
        for n, p in self.sequence_scorer.params():
            out[f"sequence_scorer.{n}"] = p
        for name, _ in self.config.tasks:
            for n, p in self.heads[name].params():
                out[f"head.{name}.{n}"] = p
        return out

    def head_parameters(self):
        return {k: v for k, v in self.named_parameters().items()
                if k.startswith("head.")}

    def zero_grad(self):
        for p in self.named_parameters().values():
            p.zero_grad()

    # -- encoder ------------------------------------------------------------

    def _check_slice_size(self, vol):
        h, w = self.config.slice_size
        if vol.shape[-2:] != (h, w):
            raise T.ShapeError(
                f"volume slices {vol.shape[-2:]} do not match config slice_size {(h, w)}"
            )

    def encode_volume(self, volume):
        """One [S,H,W] volume -> (feature [E], slice attention weights [S])."""
        vol = volume.data if isinstance(volume, Tensor) else np.asarray(volume)
        feats, weights = self._encode_batch(vol[None])
        return T.reshape(feats, (self.config.embed_dim,)), weights[0]

    def _encode_batch(self, vols):
        """[M,S,H,W] -> (pooled features [M,E], slice weights np [M,S])."""
        m, s, h, w = vols.shape
        self._check_slice_size(vols)
        x = Tensor(vols.reshape(m * s, 1, h, w))
        per_slice = self.encoder(x)                              # [M*S, E]
        per_slice = T.reshape(per_slice, (m, s, self.config.embed_dim))
        scores = T.reshape(self.slice_scorer(per_slice), (m, s))
        weights = T.softmax(scores, axis=1)                      # [M, S]
        expanded = T.broadcast_to(
            T.reshape(weights, (m, s, 1)), (m, s, self.config.embed_dim)
        )
        pooled = T.tsum(T.mul(per_slice, expanded), axis=1)      # [M, E]
        return pooled, weights.data.copy()

    # -- tokens -------------------------------------------------------------

    def build_tokens(self, study):
        """Assemble [T,E] tokens, vertebra-major / sequence-minor.

        Absent (vertebra, sequence) pairs keep their token with the learned
        missing-feature vector unless drop_missing_tokens is set, in which
        case they are removed (a vertebra always keeps at least one token).
        """
        n_vert = len(study.level_idx)
        n_chan = len(study.seq_idx)
        if n_vert == 0 or n_chan == 0:
            raise ContractError("study has no vertebrae or no sequences")

        pairs = [(v, c) for v in range(n_vert) for c in range(n_chan)]
        if self.config.drop_missing_tokens:
            kept = [(v, c) for v, c in pairs if study.present[v, c]]
            have = {v for v, _ in kept}
            for v in range(n_vert):
                if v not in have:
                    kept.extend((v, c) for c in range(n_chan))
            pairs = sorted(kept)

        present_pairs = [(v, c) for v, c in pairs if study.present[v, c]]
        groups = {}
        for v, c in present_pairs:
            groups.setdefault(study.volumes[(v, c)].shape[0], []).append((v, c))

        slice_weights = {}
        row_of = {}
        feat_blocks = []
        offset = 0
        for n_slices in sorted(groups):
            members = groups[n_slices]
            batch = np.stack([study.volumes[k] for k in members])
            feats, weights = self._encode_batch(batch)
            feat_blocks.append(feats)
            for j, key in enumerate(members):
                row_of[key] = offset + j
                slice_weights[key] = weights[j]
            offset += len(members)

        missing_row = offset
        feat_blocks.append(T.reshape(self.missing_feature, (1, self.config.embed_dim)))
        table = T.concat(feat_blocks, axis=0) if len(feat_blocks) > 1 else feat_blocks[0]

        idx = np.array([row_of.get(p, missing_row) for p in pairs], dtype=np.intp)
        visual = T.take_rows(table, idx)

        level_onehot = np.zeros((len(pairs), self.config.n_vertebra_levels))
        seq_onehot = np.zeros((len(pairs), self.config.n_sequence_types))
        for i, (v, c) in enumerate(pairs):
            level_onehot[i, study.level_idx[v]] = 1.0
            seq_onehot[i, study.seq_idx[c]] = 1.0
        tokens = T.add(
            T.add(visual, self.level_embedder(Tensor(level_onehot))),
            self.sequence_embedder(Tensor(seq_onehot)),
        )
        return tokens, pairs, slice_weights

    # -- forward ------------------------------------------------------------

    def forward(self, study, train=False, rng=None):
        """Per-vertebra logits for every task, plus attention diagnostics."""
        tokens, pairs, slice_weights = self.build_tokens(study)
        n_vert = len(study.level_idx)
        n_chan = len(study.seq_idx)
        dropout_p = self.config.dropout_p if train else 0.0
        if dropout_p > 0.0 and rng is None:
            raise ContractError("training forward needs an rng for dropout")

        x = tokens
        for layer in self.layers:
            x, _ = layer(x, dropout_p=dropout_p, rng=rng)
        x = self.final_norm(x)

        embed = self.config.embed_dim
        rectangular = len(pairs) == n_vert * n_chan
        if rectangular:
            grid = T.reshape(x, (n_vert, n_chan, embed))
            scores = T.reshape(self.sequence_scorer(x), (n_vert, n_chan, embed))
            weights = T.softmax(scores, axis=1)           # per-channel over sequences
            pooled = T.tsum(T.mul(grid, weights), axis=1)  # [N, E]
            seq_weights = weights.data.copy()
        else:
            rows_by_vert = [[] for _ in range(n_vert)]
            for i, (v, _) in enumerate(pairs):
                rows_by_vert[v].append(i)
            pooled_rows = []
            seq_weights = np.zeros((n_vert, n_chan, embed))
            scores = self.sequence_scorer(x)
            for v, rows in enumerate(rows_by_vert):
                sub = T.take_rows(x, np.array(rows, dtype=np.intp))
                w_v = T.softmax(T.take_rows(scores, np.array(rows, dtype=np.intp)), axis=0)
                pooled_rows.append(T.tsum(T.mul(sub, w_v), axis=0))
                for j, i_row in enumerate(rows):
                    seq_weights[v, pairs[i_row][1]] = w_v.data[j]
            pooled = T.stack(pooled_rows, axis=0)

        logits = {name: head(pooled) for name, head in self.heads.items()}
        return SctOutput(
            logits=logits,
            slice_weights=slice_weights,
            sequence_weights=seq_weights,
            n_vertebrae=n_vert,
            n_channels=n_chan,
        )

    def forward_single_slice(self, study, slice_index):
        """Forward with every volume restricted to one sagittal slice."""
        restricted = _RestrictedStudy(study, slice_index)
        return self.forward(restricted, train=False)


class _RestrictedStudy:
    """View of a study with each volume cut down to a single slice."""

    def __init__(self, study, slice_index):
        self.level_idx = study.level_idx
        self.seq_idx = study.seq_idx
        self.present = study.present
        self.volumes = {
            key: vol[min(slice_index, vol.shape[0] - 1)][None]
            for key, vol in study.volumes.items()
        }


@dataclass
class ModelInput:
    """Minimal study view the model consumes (see datasets.StudySample)."""

    level_idx: np.ndarray
    seq_idx: np.ndarray
    present: np.ndarray
    volumes: dict = field(default_factory=dict)
