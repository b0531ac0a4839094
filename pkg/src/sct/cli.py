"""Batch entry points: synth, train, eval, attribute, gradcheck.

Every command is a pure function of (config file, input files, seed):
re-running writes byte-identical outputs. Exit codes: 0 success, 2 bad
config/usage, 3 data error, 4 checkpoint/format error, 1 unexpected.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .checkpoint import CheckpointFormatError, load_model, save_model
from .datasets import DatasetError, load_dataset, save_dataset, split_studies
from .evaluate import (
    attribution_csv,
    evaluate,
    export_attribution,
    metrics_csv,
    predictions_csv,
)
from .gradcheck import gradcheck_model
from .labels import AnnotationError
from .losses import LossConfig
from .model import CANCER_TASKS, GRADING_TASKS, ConfigError, SctConfig, SctModel
from .optim import AdamConfig
from .phantom import PhantomSpec, SequenceContrast, generate_dataset
from .train import TrainConfigError, TrainSchedule, train
from .transforms import AugmentConfig

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_FORMAT = 4


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _load_config(path):
    if path is None:
        raise CliError("--config is required", EXIT_CONFIG)
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}", EXIT_CONFIG) from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"config {path} is not valid JSON: {exc}", EXIT_CONFIG) from exc


def _require_seed(config, args):
    if args.seed is not None:
        return int(args.seed)
    if "seed" in config:
        return int(config["seed"])
    raise CliError("seed is mandatory: pass --seed or set 'seed' in the config",
                   EXIT_CONFIG)


def _out_dir(args):
    if args.out is None:
        raise CliError("--out is required", EXIT_CONFIG)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _build(cls, data, what):
    try:
        return cls(**data)
    except TypeError as exc:
        raise CliError(f"bad {what} config: {exc}", EXIT_CONFIG) from exc
    except (ValueError, ConfigError, TrainConfigError) as exc:
        raise CliError(f"bad {what} config: {exc}", EXIT_CONFIG) from exc


def _phantom_spec(data):
    data = dict(data)
    if "sequences" in data:
        data["sequences"] = tuple(
            SequenceContrast(*entry) if isinstance(entry, (list, tuple))
            else SequenceContrast(**entry)
            for entry in data["sequences"]
        )
    if "slice_size" in data:
        data["slice_size"] = tuple(data["slice_size"])
    if "lesion_level_probs" in data:
        data["lesion_level_probs"] = tuple(data["lesion_level_probs"])
    if "level_vocabulary" in data:
        data["level_vocabulary"] = tuple(data["level_vocabulary"])
    return _build(PhantomSpec, data, "phantom")


def _registry_tasks(registry, model_cfg):
    if isinstance(registry, list):
        return tuple((str(n), int(k)) for n, k in registry)
    if registry == "cancer":
        return CANCER_TASKS
    if registry == "grading":
        return GRADING_TASKS
    if registry == "custom":
        if "tasks" not in model_cfg:
            raise CliError("registry 'custom' needs model.tasks", EXIT_CONFIG)
        return tuple((str(n), int(k)) for n, k in model_cfg["tasks"])
    raise CliError(f"unknown task registry {registry!r}", EXIT_CONFIG)


def cmd_synth(args):
    config = _load_config(args.config)
    seed = _require_seed(config, args)
    out = _out_dir(args)
    spec = _phantom_spec(config.get("phantom", {}))
    registry = config.get("registry", "cancer")
    if registry not in ("cancer", "grading"):
        raise CliError(f"synth registry must be cancer or grading, got {registry!r}",
                       EXIT_CONFIG)
    studies, ledger = generate_dataset(
        spec,
        int(config.get("n_train", 0)),
        int(config.get("n_val", 0)),
        int(config.get("n_test", 0)),
        seed=seed,
        registry=registry,
        with_report=bool(config.get("with_report", True)),
    )
    manifest = save_dataset(
        studies, out, [s.name for s in spec.sequences], spec.level_vocabulary,
        task_registry=registry, ledger=ledger, seed=seed,
    )
    print(f"wrote {len(studies)} studies to {manifest}")
    return 0


def _model_from_dataset(config, manifest, studies, seed):
    model_cfg = dict(config.get("model", {}))
    registry = config.get("registry", manifest.get("task_registry", "cancer"))
    tasks = _registry_tasks(registry, model_cfg)
    model_cfg.setdefault("tasks", tasks)
    model_cfg["tasks"] = tuple(tuple(t) for t in model_cfg["tasks"])
    model_cfg.setdefault("n_sequence_types", len(manifest["sequence_types"]))
    model_cfg.setdefault("n_vertebra_levels", len(manifest["level_vocabulary"]))
    if studies:
        any_vol = next(iter(studies[0].volumes.values()))
        model_cfg.setdefault("slice_size", tuple(any_vol.shape[1:]))
    if "encoder_channels" in model_cfg:
        model_cfg["encoder_channels"] = tuple(model_cfg["encoder_channels"])
    if "slice_size" in model_cfg:
        model_cfg["slice_size"] = tuple(model_cfg["slice_size"])
    try:
        return SctModel(SctConfig(**model_cfg), seed=seed)
    except (TypeError, ConfigError) as exc:
        raise CliError(f"bad model config: {exc}", EXIT_CONFIG) from exc


def _schedule(config, seed):
    data = dict(config.get("schedule", {}))
    if data.get("augment") is not None:
        data["augment"] = _build(AugmentConfig, data["augment"], "augment")
    if "sequence_drop_probs" in data and data["sequence_drop_probs"] is not None:
        data["sequence_drop_probs"] = tuple(data["sequence_drop_probs"])
    data.setdefault("seed", seed)
    return _build(TrainSchedule, data, "schedule")


def cmd_train(args):
    config = _load_config(args.config)
    seed = _require_seed(config, args)
    out = _out_dir(args)
    manifest_path = config.get("manifest")
    if manifest_path is None:
        raise CliError("train config needs 'manifest'", EXIT_CONFIG)
    studies, manifest = load_dataset(manifest_path)
    by_split = split_studies(studies)
    model = _model_from_dataset(config, manifest, studies, seed=seed)
    schedule = _schedule(config, seed)
    loss_cfg = _build(LossConfig, config.get("loss", {}), "loss")
    adam_cfg = _build(AdamConfig, config.get("adam", {}), "adam")
    history = train(model, by_split["train"], by_split["val"], schedule,
                    loss_cfg, adam_cfg)
    save_model(model, out / "checkpoint.sct")
    (out / "history.csv").write_text(history.to_csv())
    print(f"trained {len(history.rows)} epochs; "
          f"checkpoint and history in {out}")
    return 0


def _load_checkpoint_and_data(config):
    for key in ("manifest", "checkpoint"):
        if key not in config:
            raise CliError(f"config needs {key!r}", EXIT_CONFIG)
    studies, manifest = load_dataset(config["manifest"])
    model = load_model(config["checkpoint"])
    return model, studies, manifest


def cmd_eval(args):
    config = _load_config(args.config)
    _require_seed(config, args)
    out = _out_dir(args)
    model, studies, _ = _load_checkpoint_and_data(config)
    split = config.get("split", "test")
    chosen = [s for s in studies if s.split == split]
    if not chosen:
        raise CliError(f"split {split!r} is empty", EXIT_DATA)
    sources = config.get("label_sources", ["exhaustive"])
    for source in sources:
        metric_rows, prediction_rows = evaluate(model, chosen, source)
        (out / f"metrics_{source}.csv").write_text(metrics_csv(metric_rows))
        (out / f"predictions_{source}.csv").write_text(
            predictions_csv(prediction_rows)
        )
    print(f"evaluated {len(chosen)} {split} studies for sources {sources}")
    return 0


def cmd_attribute(args):
    config = _load_config(args.config)
    _require_seed(config, args)
    out = _out_dir(args)
    model, studies, _ = _load_checkpoint_and_data(config)
    wanted = config.get("study_ids")
    if wanted is not None:
        index = {s.study_id: s for s in studies}
        missing = [w for w in wanted if w not in index]
        if missing:
            raise CliError(f"study ids not in dataset: {missing}", EXIT_DATA)
        chosen = [index[w] for w in wanted]
    else:
        split = config.get("split", "test")
        chosen = [s for s in studies if s.split == split]
    rows = []
    for study in chosen:
        rows.extend(export_attribution(model, study))
    (out / "attribution.csv").write_text(attribution_csv(rows))
    print(f"wrote attribution for {len(chosen)} studies")
    return 0


def cmd_gradcheck(args):
    config = _load_config(args.config) if args.config else {}
    seed = args.seed if args.seed is not None else int(config.get("seed", 0))
    out = _out_dir(args)
    model_cfg = None
    if "model" in config:
        data = dict(config["model"])
        for key in ("encoder_channels", "slice_size"):
            if key in data:
                data[key] = tuple(data[key])
        if "tasks" in data:
            data["tasks"] = tuple(tuple(t) for t in data["tasks"])
        model_cfg = _build(SctConfig, data, "model")
    tolerance = float(config.get("tolerance", 1e-4))
    errors = gradcheck_model(config=model_cfg, seed=seed,
                             h=float(config.get("h", 1e-5)))
    lines = ["block,max_rel_err"]
    for name in sorted(errors):
        lines.append(f"{name},{errors[name]!r}")
    (out / "gradcheck.csv").write_text("\n".join(lines) + "\n")
    worst = max(errors.values())
    ok = worst < tolerance
    print(f"gradcheck {'PASS' if ok else 'FAIL'}: "
          f"{len(errors)} blocks, worst rel err {worst:.3e} "
          f"(tolerance {tolerance:g})")
    return 0 if ok else 1


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sct",
        description="Spine context model: synthesize phantoms, train, "
                    "evaluate, attribute, gradcheck.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (
        ("synth", cmd_synth),
        ("train", cmd_train),
        ("eval", cmd_eval),
        ("attribute", cmd_attribute),
        ("gradcheck", cmd_gradcheck),
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", help="path to the command's JSON config")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", help="output directory")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (DatasetError, AnnotationError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointFormatError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (ConfigError, TrainConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
