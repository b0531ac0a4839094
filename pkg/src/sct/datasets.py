"""Study samples and the on-disk dataset format.

A dataset is a canonical-JSON manifest plus one "SCTV" binary file per
(vertebra, sequence) volume: magic, u32 version, u32 dims S,H,W, then
float32 little-endian voxels in row-major order. Volumes rest on disk in
float32 and are normalized to float64 at load time.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .labels import UNKNOWN, AnnotationRecord, derive_labels
from .transforms import normalize_volume

VOLUME_MAGIC = b"SCTV"
VOLUME_VERSION = 1
MANIFEST_FORMAT = "sct-dataset"
MANIFEST_VERSION = 1

SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    """Manifest or volume files violate the dataset format."""


@dataclass
class StudySample:
    """One study: every vertebra as seen in every sequence, plus labels."""

    study_id: str
    split: str
    levels: list
    sequences: list
    level_idx: np.ndarray
    seq_idx: np.ndarray
    present: np.ndarray                    # [N, C] bool
    volumes: dict                          # (v, c) -> normalized f64 [S,H,W]
    labels_exhaustive: dict = field(default_factory=dict)  # cond -> int8 [N]
    labels_report: dict = field(default_factory=dict)      # cond -> int8 [N], -1 unknown
    bag_labels: dict = field(default_factory=dict)         # cond -> 0/1
    annotation: AnnotationRecord | None = None
    grading: dict | None = None            # task -> int [N], -1 missing
    truth: dict | None = None              # generator-only extras
    raw_volumes: dict | None = None        # un-normalized f32, for saving

    def n_vertebrae(self):
        return len(self.levels)

    def condition_labels(self, source):
        if source == "exhaustive":
            return self.labels_exhaustive
        if source == "report":
            return self.labels_report
        raise DatasetError(f"unknown label source {source!r}")


# ---------------------------------------------------------------------------
# volume files
# ---------------------------------------------------------------------------


def save_volume(path, volume):
    vol = np.asarray(volume, dtype=np.float32)
    if vol.ndim != 3:
        raise DatasetError(f"volume must be [S,H,W], got shape {vol.shape}")
    with open(path, "wb") as fh:
        fh.write(VOLUME_MAGIC)
        fh.write(struct.pack("<IIII", VOLUME_VERSION, *vol.shape))
        fh.write(vol.astype("<f4", copy=False).tobytes())


def load_volume(path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read volume file {path}: {exc}") from exc
    if raw[:4] != VOLUME_MAGIC:
        raise DatasetError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 20:
        raise DatasetError(f"{path}: truncated header")
    version, s, h, w = struct.unpack("<IIII", raw[4:20])
    if version != VOLUME_VERSION:
        raise DatasetError(f"{path}: unsupported volume version {version}")
    expect = 20 + 4 * s * h * w
    if len(raw) != expect:
        raise DatasetError(f"{path}: expected {expect} bytes, found {len(raw)}")
    return np.frombuffer(raw[20:], dtype="<f4").reshape(s, h, w).astype(np.float32)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


def canonical_json_str(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _labels_to_json(labels):
    return {k: [int(x) for x in v] for k, v in sorted(labels.items())}


def save_dataset(studies, out_dir, sequence_types, level_vocabulary,
                 task_registry="cancer", ledger=None, seed=None):
    """Write volumes plus manifest.json; volumes are stored un-normalized."""
    out_dir = Path(out_dir)
    vol_dir = out_dir / "volumes"
    vol_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for study in studies:
        vol_paths = {}
        source = study.raw_volumes if study.raw_volumes is not None else study.volumes
        for (v, c), vol in sorted(source.items()):
            name = f"{study.study_id}_{study.levels[v]}_{study.sequences[c]}.sctv"
            save_volume(vol_dir / name, vol)
            vol_paths.setdefault(study.levels[v], {})[study.sequences[c]] = \
                f"volumes/{name}"
        entry = {
            "id": study.study_id,
            "split": study.split,
            "vertebrae": list(study.levels),
            "sequences": list(study.sequences),
            "volumes": vol_paths,
            "labels_exhaustive": _labels_to_json(study.labels_exhaustive),
            "bag_labels": {k: int(v) for k, v in sorted(study.bag_labels.items())},
        }
        if study.annotation is not None:
            entry["annotation"] = study.annotation.to_dict()
        if study.grading is not None:
            entry["grading"] = _labels_to_json(study.grading)
        if study.truth is not None:
            entry["truth"] = study.truth
        entries.append(entry)
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "seed": seed,
        "task_registry": task_registry,
        "sequence_types": list(sequence_types),
        "level_vocabulary": list(level_vocabulary),
        "label_ledger": ledger or {},
        "studies": entries,
    }
    (out_dir / "manifest.json").write_text(canonical_json_str(manifest))
    return out_dir / "manifest.json"


def load_dataset(manifest_path):
    """Load a dataset from its manifest; returns (studies, manifest dict).

    Report-style labels are re-derived from the stored annotation records;
    volumes are normalized to float64.
    """
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except OSError as exc:
        raise DatasetError(f"cannot read manifest {manifest_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{manifest_path}: invalid JSON: {exc}") from exc
    if manifest.get("format") != MANIFEST_FORMAT:
        raise DatasetError(f"{manifest_path}: not a {MANIFEST_FORMAT} manifest")
    base = manifest_path.parent
    sequence_types = list(manifest["sequence_types"])
    vocab = list(manifest["level_vocabulary"])
    level_of = {lvl: i for i, lvl in enumerate(vocab)}
    seq_of = {s: i for i, s in enumerate(sequence_types)}

    studies = []
    for entry in manifest["studies"]:
        levels = list(entry["vertebrae"])
        sequences = list(entry["sequences"])
        if entry["split"] not in SPLITS:
            raise DatasetError(f"{entry['id']}: unknown split {entry['split']!r}")
        n_vert, n_chan = len(levels), len(sequences)
        present = np.zeros((n_vert, n_chan), dtype=bool)
        volumes = {}
        for v, lvl in enumerate(levels):
            for c, seq in enumerate(sequences):
                rel = entry["volumes"].get(lvl, {}).get(seq)
                if rel is None:
                    continue
                raw = load_volume(base / rel)
                volumes[(v, c)] = normalize_volume(raw)
                present[v, c] = True
        if not np.all(present.any(axis=1)):
            missing = [levels[v] for v in np.where(~present.any(axis=1))[0]]
            raise DatasetError(
                f"{entry['id']}: vertebrae with no volume in any sequence: {missing}"
            )

        labels_exh = {
            k: np.asarray(v, dtype=np.int8)
            for k, v in entry.get("labels_exhaustive", {}).items()
        }
        annotation = None
        labels_rep = {}
        if "annotation" in entry:
            annotation = AnnotationRecord.from_dict(entry["id"], entry["annotation"])
            triple = derive_labels(annotation, levels)
            labels_rep = triple.vertebra
        grading = None
        if "grading" in entry:
            grading = {
                k: np.asarray(v, dtype=np.int64)
                for k, v in entry["grading"].items()
            }
        studies.append(
            StudySample(
                study_id=entry["id"],
                split=entry["split"],
                levels=levels,
                sequences=sequences,
                level_idx=np.array([level_of[l] for l in levels], dtype=np.intp),
                seq_idx=np.array([seq_of[s] for s in sequences], dtype=np.intp),
                present=present,
                volumes=volumes,
                labels_exhaustive=labels_exh,
                labels_report=labels_rep,
                bag_labels={k: int(v) for k, v in entry.get("bag_labels", {}).items()},
                annotation=annotation,
                grading=grading,
                truth=entry.get("truth"),
            )
        )
    return studies, manifest


def split_studies(studies):
    by_split = {s: [] for s in SPLITS}
    for st in studies:
        by_split[st.split].append(st)
    return by_split


def count_labels(studies, source="exhaustive"):
    """Per-condition label counts, for cross-checking the generator ledger."""
    counts = {}
    for study in studies:
        labels = study.condition_labels(source)
        for cond, codes in labels.items():
            slot = counts.setdefault(
                cond, {"positive": 0, "negative": 0, "unknown": 0, "bag_positive": 0}
            )
            slot["positive"] += int(np.sum(codes == 1))
            slot["negative"] += int(np.sum(codes == 0))
            slot["unknown"] += int(np.sum(codes == UNKNOWN))
        for cond, bag in study.bag_labels.items():
            counts.setdefault(
                cond, {"positive": 0, "negative": 0, "unknown": 0, "bag_positive": 0}
            )["bag_positive"] += int(bag)
    return counts
