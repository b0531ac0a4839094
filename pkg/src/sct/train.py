"""Two-phase training: patience-based full-model training, then a fixed
head-only finetune with the encoder and transformer frozen."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .losses import LossConfig, grading_loss, hybrid_loss
from .optim import Adam, AdamConfig
from .transforms import AugmentConfig, augment_study, sequence_drop


class TrainConfigError(ValueError):
    """Training was asked to run with an unusable configuration."""


@dataclass
class TrainSchedule:
    batch_size: int = 6
    patience: int = 10               # non-improving validation epochs before stop
    finetune_epochs: int = 10
    max_epochs: int = 200
    seed: int = 0
    label_source: str = "report"     # supervision for condition tasks
    augment: AugmentConfig | None = None
    sequence_drop_probs: tuple | None = (0.4, 0.1)

    def __post_init__(self):
        if self.patience < 1:
            raise TrainConfigError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 1 or self.max_epochs < 0 or self.finetune_epochs < 0:
            raise TrainConfigError(f"bad schedule {self}")


@dataclass
class TrainHistory:
    rows: list = field(default_factory=list)  # dicts: phase, epoch, train, val

    def add(self, phase, epoch, train_loss, val_loss):
        self.rows.append(
            {
                "phase": phase,
                "epoch": epoch,
                "train_loss": train_loss,
                "val_loss": val_loss,
            }
        )

    def to_csv(self) -> str:
        lines = ["phase,epoch,train_loss,val_loss"]
        for r in self.rows:
            lines.append(
                f"{r['phase']},{r['epoch']},{r['train_loss']!r},{r['val_loss']!r}"
            )
        return "\n".join(lines) + "\n"


class EarlyStopper:
    """Stop after ``patience`` successive epochs without a new best loss."""

    def __init__(self, patience):
        self.patience = patience
        self.best = np.inf
        self.stale = 0

    def update(self, val_loss):
        """Returns (improved, should_stop)."""
        if val_loss < self.best:
            self.best = val_loss
            self.stale = 0
            return True, False
        self.stale += 1
        return False, self.stale >= self.patience


def study_loss(model, out, study, loss_cfg: LossConfig, label_source):
    """Loss of one study given the forward output, per the model's tasks."""
    tasks = model.config.tasks
    if study.grading is not None and all(name in study.grading for name, _ in tasks):
        return grading_loss(out.logits, study.grading, tasks, eps=loss_cfg.eps)
    conditions = [name for name, _ in tasks]
    labels = study.condition_labels(label_source)
    return hybrid_loss(out.logits, labels, study.bag_labels, loss_cfg, conditions)


def dataset_loss(model, studies, loss_cfg, label_source):
    """Mean per-study loss in evaluation mode (no tape, no augmentation)."""
    total = 0.0
    for study in studies:
        out = model.forward(study, train=False)
        total += float(study_loss(model, out, study, loss_cfg, label_source).data)
    return total / len(studies)


def parameters_hash(model, prefixes=None) -> str:
    digest = hashlib.sha256()
    for name, p in model.named_parameters().items():
        if prefixes is not None and not name.startswith(prefixes):
            continue
        digest.update(name.encode())
        digest.update(p.data.tobytes())
    return digest.hexdigest()


def _snapshot(model):
    return {k: p.data.copy() for k, p in model.named_parameters().items()}


def _restore(model, state):
    for k, p in model.named_parameters().items():
        p.data = state[k].copy()


def _prepare_study(study, schedule, epoch, index):
    rng = np.random.default_rng(
        np.random.SeedSequence([schedule.seed, 1, epoch, index])
    )
    out = study
    if schedule.augment is not None:
        out = augment_study(out, rng, schedule.augment)
    if schedule.sequence_drop_probs is not None and len(study.seq_idx) >= 2:
        p_single, p_all = schedule.sequence_drop_probs
        out = sequence_drop(out, rng, p_single=p_single, p_all=p_all)
    return out, rng


def _run_epoch(model, studies, schedule, loss_cfg, optimizer, epoch):
    shuffle_rng = np.random.default_rng(
        np.random.SeedSequence([schedule.seed, 0, epoch])
    )
    order = shuffle_rng.permutation(len(studies))
    total = 0.0
    for lo in range(0, len(order), schedule.batch_size):
        batch = order[lo : lo + schedule.batch_size]
        with T.Tape():
            loss = None
            for j in batch:
                prepared, item_rng = _prepare_study(
                    studies[j], schedule, epoch, int(j)
                )
                out = model.forward(prepared, train=True, rng=item_rng)
                term = study_loss(model, out, prepared, loss_cfg,
                                  schedule.label_source)
                loss = term if loss is None else T.add(loss, term)
            loss = T.mul(loss, 1.0 / len(batch))
            if loss.producer is not None:
                T.backward(loss)
        optimizer.step()
        model.zero_grad()
        total += float(loss.data) * len(batch)
    return total / len(studies)


def train(model, train_studies, val_studies, schedule: TrainSchedule,
          loss_cfg: LossConfig | None = None,
          adam_cfg: AdamConfig | None = None) -> TrainHistory:
    """Phase 1 trains everything until ``patience`` validation epochs fail
    to improve the best loss, then restores the best parameters. Phase 2
    runs exactly ``finetune_epochs`` epochs on the task heads alone.
    Deterministic for a fixed seed."""
    if not train_studies or not val_studies:
        raise TrainConfigError("train and validation splits must be non-empty")
    loss_cfg = loss_cfg or LossConfig()
    adam_cfg = adam_cfg or AdamConfig()
    history = TrainHistory()

    optimizer = Adam(model.named_parameters(), adam_cfg)
    stopper = EarlyStopper(schedule.patience)
    best_state = _snapshot(model)
    for epoch in range(1, schedule.max_epochs + 1):
        train_loss = _run_epoch(model, train_studies, schedule, loss_cfg,
                                optimizer, epoch)
        val_loss = dataset_loss(model, val_studies, loss_cfg, schedule.label_source)
        history.add("train", epoch, train_loss, val_loss)
        improved, stop = stopper.update(val_loss)
        if improved:
            best_state = _snapshot(model)
        if stop:
            break
    _restore(model, best_state)

    if schedule.finetune_epochs > 0:
        head_opt = Adam(model.head_parameters(), adam_cfg)
        for epoch in range(1, schedule.finetune_epochs + 1):
            train_loss = _run_epoch(model, train_studies, schedule, loss_cfg,
                                    head_opt, 10_000 + epoch)
            val_loss = dataset_loss(model, val_studies, loss_cfg,
                                    schedule.label_source)
            history.add("finetune", epoch, train_loss, val_loss)
    return history
