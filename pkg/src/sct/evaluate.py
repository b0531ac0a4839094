"""Evaluation over a dataset split and attention/slicewise attribution export.

All emitters produce deterministic CSV text: same model, same data, same
bytes. Metric rows carry the included/excluded instance counts so unknown
exclusion is auditable.
"""

from __future__ import annotations

import numpy as np

from .labels import UNKNOWN
from .losses import bag_aggregate
from .metrics import balanced_accuracy, roc_auc
from .model import n_logits
from .tensor import Tensor


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _fmt(x):
    if x is None:
        return ""
    return repr(float(x))


def predict_studies(model, studies):
    """Forward every study once (dropout off); returns per-study outputs."""
    return [model.forward(study, train=False) for study in studies]


def evaluate(model, studies, label_source="exhaustive"):
    """Metrics plus a per-vertebra prediction dump.

    Binary tasks report vertebra-level ROC AUC (unknown-labelled vertebrae
    excluded) and a study-level bag AUC; multi-class tasks report balanced
    accuracy of the argmax prediction (ties break toward the lower class).
    Undefined metrics are reported absent, not zero.
    """
    if not studies:
        raise ValueError("evaluate needs a non-empty split")
    outputs = predict_studies(model, studies)
    metric_rows = []
    prediction_rows = []
    for name, k in model.config.tasks:
        if k == 2:
            scores, labels = [], []
            bag_scores, bag_labels = [], []
            excluded = 0
            for study, out in zip(studies, outputs):
                logits = out.logits[name].data.reshape(-1)
                probs = _sigmoid(logits)
                study_labels = _task_labels(study, name, label_source)
                for v in range(len(probs)):
                    label = int(study_labels[v])
                    prediction_rows.append(
                        (study.study_id, study.levels[v], name,
                         float(probs[v]), label)
                    )
                    if label == UNKNOWN:
                        excluded += 1
                    else:
                        scores.append(float(probs[v]))
                        labels.append(label)
                bag_scores.append(float(bag_aggregate(Tensor(probs), "max").data))
                bag_labels.append(int(study.bag_labels.get(name, 0)))
            auc = roc_auc(scores, labels) if scores else None
            metric_rows.append((name, "roc_auc", auc, len(scores), excluded))
            bag_auc = roc_auc(bag_scores, bag_labels)
            metric_rows.append(
                (name, "bag_roc_auc", bag_auc, len(bag_scores), 0)
            )
        else:
            preds, labels = [], []
            excluded = 0
            for study, out in zip(studies, outputs):
                logits = out.logits[name].data
                study_labels = _task_labels(study, name, label_source)
                for v in range(logits.shape[0]):
                    label = int(study_labels[v])
                    pred = int(np.argmax(logits[v]))  # first max: lower class wins ties
                    prediction_rows.append(
                        (study.study_id, study.levels[v], name, pred, label)
                    )
                    if label < 0:
                        excluded += 1
                    else:
                        preds.append(pred)
                        labels.append(label)
            bacc = balanced_accuracy(preds, labels, k) if labels else None
            metric_rows.append((name, "balanced_accuracy", bacc, len(preds), excluded))
    return metric_rows, prediction_rows


def _task_labels(study, name, label_source):
    if study.grading is not None and name in study.grading:
        return study.grading[name]
    labels = study.condition_labels(label_source)
    if name not in labels:
        raise ValueError(
            f"{study.study_id}: no {label_source!r} labels for task {name!r}"
        )
    return labels[name]


def metrics_csv(metric_rows) -> str:
    lines = ["task,metric,value,n_included,n_excluded"]
    for task, metric, value, n_inc, n_exc in metric_rows:
        lines.append(f"{task},{metric},{_fmt(value)},{n_inc},{n_exc}")
    return "\n".join(lines) + "\n"


def predictions_csv(prediction_rows) -> str:
    lines = ["study,level,task,score,label"]
    for study, level, task, score, label in prediction_rows:
        lines.append(f"{study},{level},{task},{_fmt(score)},{label}")
    return "\n".join(lines) + "\n"


def export_attribution(model, study):
    """Slice attention, sequence-attention summaries, and slicewise scores.

    Rows are (study, level, sequence, kind, index, task, value):
    kind "slice_weight" carries the attention weight of slice ``index``;
    kind "sequence_weight" the channel-averaged pooling weight of that
    sequence; kind "slice_score" the probability/score of the task when the
    model sees only slice ``index``.
    """
    out = model.forward(study, train=False)
    rows = []
    for (v, c), weights in sorted(out.slice_weights.items()):
        for s, w in enumerate(weights):
            rows.append(
                (study.study_id, study.levels[v], study.sequences[c],
                 "slice_weight", s, "", float(w))
            )
    for v in range(len(study.levels)):
        for c in range(len(study.sequences)):
            rows.append(
                (study.study_id, study.levels[v], study.sequences[c],
                 "sequence_weight", 0, "",
                 float(out.sequence_weights[v, c].mean()))
            )
    n_slices = max(vol.shape[0] for vol in study.volumes.values())
    for s in range(n_slices):
        sliced = model.forward_single_slice(study, s)
        for name, k in model.config.tasks:
            logits = sliced.logits[name].data
            for v in range(logits.shape[0]):
                score = (
                    float(_sigmoid(logits[v])[0])
                    if n_logits(k) == 1
                    else float(np.argmax(logits[v]))
                )
                rows.append(
                    (study.study_id, study.levels[v], "", "slice_score",
                     s, name, score)
                )
    return rows


def attribution_csv(rows) -> str:
    lines = ["study,level,sequence,kind,index,task,value"]
    for study, level, sequence, kind, index, task, value in rows:
        lines.append(f"{study},{level},{sequence},{kind},{index},{task},{value!r}")
    return "\n".join(lines) + "\n"
