"""The context-separation experiment.

Both models share the architecture; the baseline sees one vertebra per
study (context removed by construction) while the context model sees whole
studies. The exact enumeration ceiling bounds any single-vertebra observer,
so the baseline must land at or below it while the context model, which can
read the study-wide offset from lesion-free vertebrae, must clear it.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .datasets import split_studies
from .evaluate import evaluate
from .losses import LossConfig
from .model import SctConfig, SctModel
from .optim import AdamConfig
from .phantom import context_free_auc_ceiling, default_context_spec, generate_dataset
from .train import TrainSchedule, train

DATA_SEED = 20260810  # committed: the acceptance run is this exact draw


@dataclass
class ContextExperimentConfig:
    n_train: int = 200
    n_val: int = 50
    n_test: int = 100
    data_seed: int = DATA_SEED
    model_seed: int = 1
    baseline_seed: int = 2
    embed_dim: int = 32
    n_heads: int = 4
    encoder_channels: tuple = (8, 16)
    dropout_p: float = 0.1
    lr: float = 1e-3
    context_epochs: int = 60
    baseline_epochs: int = 30
    patience: int = 10
    batch_size: int = 6
    baseline_batch_size: int = 40


def explode_to_single_vertebra(studies):
    """One single-vertebra study per (study, vertebra): context removed."""
    out = []
    for study in studies:
        for v in range(study.n_vertebrae()):
            piece = copy.copy(study)
            piece.study_id = f"{study.study_id}_{study.levels[v]}"
            piece.levels = [study.levels[v]]
            piece.level_idx = study.level_idx[v : v + 1]
            piece.present = study.present[v : v + 1]
            piece.volumes = {
                (0, c): study.volumes[(v, c)]
                for c in range(len(study.seq_idx))
                if (v, c) in study.volumes
            }
            piece.labels_exhaustive = {
                cond: codes[v : v + 1]
                for cond, codes in study.labels_exhaustive.items()
            }
            piece.labels_report = {
                cond: codes[v : v + 1] for cond, codes in study.labels_report.items()
            }
            piece.bag_labels = {
                cond: int(codes[v] == 1)
                for cond, codes in study.labels_exhaustive.items()
            }
            piece.grading = (
                None
                if study.grading is None
                else {t: vals[v : v + 1] for t, vals in study.grading.items()}
            )
            piece.raw_volumes = None
            out.append(piece)
    return out


def context_model_config(spec, cfg: ContextExperimentConfig) -> SctConfig:
    return SctConfig(
        embed_dim=cfg.embed_dim,
        n_transformer_layers=2,
        n_heads=cfg.n_heads,
        n_vertebra_levels=len(spec.level_vocabulary),
        n_sequence_types=len(spec.sequences),
        encoder_channels=cfg.encoder_channels,
        dropout_p=cfg.dropout_p,
        tasks=(("metastasis", 2),),
        slice_size=spec.slice_size,
    )


def _metastasis_auc(model, studies):
    rows, _ = evaluate(model, studies, "exhaustive")
    return next(v for t, m, v, _, _ in rows if t == "metastasis" and m == "roc_auc")


def run_context_experiment(cfg: ContextExperimentConfig | None = None,
                           progress=None):
    """Returns ceiling, baseline and context-model test AUCs, and histories."""
    cfg = cfg or ContextExperimentConfig()
    spec = default_context_spec()
    ceiling = context_free_auc_ceiling(spec)

    studies, _ = generate_dataset(
        spec, cfg.n_train, cfg.n_val, cfg.n_test, seed=cfg.data_seed,
        with_report=False,
    )
    by_split = split_studies(studies)
    loss_cfg = LossConfig(w_si=1.0, w_mil=0.0)
    adam_cfg = AdamConfig(lr=cfg.lr)
    model_cfg = context_model_config(spec, cfg)

    if progress:
        progress(f"ceiling {ceiling:.4f}; training context model")
    context_model = SctModel(model_cfg, seed=cfg.model_seed)
    context_history = train(
        context_model, by_split["train"], by_split["val"],
        TrainSchedule(
            batch_size=cfg.batch_size, patience=cfg.patience, finetune_epochs=0,
            max_epochs=cfg.context_epochs, seed=cfg.model_seed,
            label_source="exhaustive", augment=None, sequence_drop_probs=None,
        ),
        loss_cfg, adam_cfg,
    )
    context_auc = _metastasis_auc(context_model, by_split["test"])

    if progress:
        progress(f"context AUC {context_auc:.4f}; training baseline")
    exploded = {k: explode_to_single_vertebra(v) for k, v in by_split.items()}
    baseline_model = SctModel(model_cfg, seed=cfg.baseline_seed)
    baseline_history = train(
        baseline_model, exploded["train"], exploded["val"],
        TrainSchedule(
            batch_size=cfg.baseline_batch_size, patience=cfg.patience,
            finetune_epochs=0, max_epochs=cfg.baseline_epochs,
            seed=cfg.baseline_seed, label_source="exhaustive",
            augment=None, sequence_drop_probs=None,
        ),
        loss_cfg, adam_cfg,
    )
    baseline_auc = _metastasis_auc(baseline_model, exploded["test"])

    return {
        "ceiling": ceiling,
        "context_auc": context_auc,
        "baseline_auc": baseline_auc,
        "context_history": context_history,
        "baseline_history": baseline_history,
        "context_model": context_model,
        "baseline_model": baseline_model,
        "splits": by_split,
    }
