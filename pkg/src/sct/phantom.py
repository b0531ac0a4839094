"""Synthetic spine phantoms with a study-level intensity confound.

Each study draws a hidden baseline offset b in {0,1} shared by all its
vertebrae; each vertebra draws a lesion contrast level c in {0,1,2,3} and
is positive for metastasis iff c >= 2. The rendered marrow-signal region
carries contrast offset_scale*b + c, so a single vertebra only exposes the
sum: with offset_scale 2, (b=0, c=2) and (b=1, c=0) render identically, as
do (b=0, c=3) and (b=1, c=1). Lesion-free vertebrae render the offset
alone, which is what makes b recoverable from neighbours but not from the
target vertebra itself.

``context_free_auc_ceiling`` enumerates the generative (b, c) mixture and
returns the Bayes-optimal AUC of any observer that sees one vertebra at a
time; a context-using model can beat it, a single-vertebra model cannot.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .datasets import StudySample
from .labels import DEFAULT_LEVELS, AnnotationRecord, ConditionAnnotation
from .transforms import normalize_volume

POSITIVE_THRESHOLD = 2  # metastasis label is (c >= 2)


@dataclass
class SequenceContrast:
    name: str
    body_intensity: float = 1.0
    lesion_sign: float = 1.0


@dataclass
class PhantomSpec:
    n_vertebrae: int = 10
    n_slices: int = 3
    slice_size: tuple = (20, 20)
    sequences: tuple = (SequenceContrast("T2", 1.0, 1.0),)
    p_baseline: float = 0.5            # P(b = 1)
    offset_scale: float = 2.0          # rendered contrast per unit of b
    clean_fraction: float = 0.3        # forced floor of lesion-free vertebrae
    lesion_level_probs: tuple = (2 / 7, 3 / 7, 2 / 7)  # c in {1,2,3} otherwise
    lesion_jitter: float = 0.0         # sd of contrast jitter, 0 = exact levels
    noise_sigma: float = 0.05
    texture_amp: float = 0.08
    p_fracture: float = 0.0
    p_compression: float = 0.0
    lesion_slice_extent: int | None = None  # confine lesion to this many slices
    level_vocabulary: tuple = DEFAULT_LEVELS
    report_explicit_prob: float = 0.6
    report_negative_prob: float = 0.05

    def __post_init__(self):
        if self.n_vertebrae < 1 or self.n_slices < 1 or not self.sequences:
            raise ValueError(f"phantom counts must be >= 1: {self}")
        if any(s < 1 for s in self.slice_size):
            raise ValueError(f"bad slice_size {self.slice_size}")
        if not 0.0 <= self.p_baseline <= 1.0 or not 0.0 <= self.clean_fraction <= 1.0:
            raise ValueError(f"probabilities must lie in [0, 1]: {self}")
        if len(self.lesion_level_probs) != 3 or any(
            p < 0 for p in self.lesion_level_probs
        ) or abs(sum(self.lesion_level_probs) - 1.0) > 1e-9:
            raise ValueError(
                f"lesion_level_probs must be a distribution over c in {{1,2,3}}: "
                f"{self.lesion_level_probs}"
            )
        if self.lesion_jitter < 0 or self.noise_sigma < 0:
            raise ValueError(f"negative noise scales: {self}")

    def n_clean(self):
        return int(math.ceil(self.clean_fraction * self.n_vertebrae))

    def to_dict(self):
        d = {
            k: getattr(self, k)
            for k in (
                "n_vertebrae", "n_slices", "p_baseline", "offset_scale",
                "clean_fraction", "lesion_jitter", "noise_sigma", "texture_amp",
                "p_fracture", "p_compression", "lesion_slice_extent",
                "report_explicit_prob", "report_negative_prob",
            )
        }
        d["slice_size"] = list(self.slice_size)
        d["lesion_level_probs"] = list(self.lesion_level_probs)
        d["sequences"] = [
            [s.name, s.body_intensity, s.lesion_sign] for s in self.sequences
        ]
        d["level_vocabulary"] = list(self.level_vocabulary)
        return d


def default_context_spec() -> PhantomSpec:
    """The committed context task: exact ceiling 7/8 from two aliased pairs."""
    return PhantomSpec()


# ---------------------------------------------------------------------------
# exact enumeration of the generative mixture
# ---------------------------------------------------------------------------


def lesion_level_marginal(spec: PhantomSpec):
    """Marginal P(c = k) for one vertebra, including the forced clean floor."""
    q0 = spec.n_clean() / spec.n_vertebrae
    rest = 1.0 - q0
    probs = [q0] + [rest * p for p in spec.lesion_level_probs]
    return np.asarray(probs)


def observation_mixture(spec: PhantomSpec):
    """All (b, c) cells as (observed contrast, probability, is_positive)."""
    q = lesion_level_marginal(spec)
    cells = []
    for b in (0, 1):
        pb = spec.p_baseline if b == 1 else 1.0 - spec.p_baseline
        for c in range(4):
            cells.append(
                (spec.offset_scale * b + c, pb * q[c], c >= POSITIVE_THRESHOLD)
            )
    return cells


def _discrete_bayes_auc(cells):
    groups = {}
    for obs, weight, positive in cells:
        key = round(obs, 9)
        pos, neg = groups.get(key, (0.0, 0.0))
        if positive:
            pos += weight
        else:
            neg += weight
        groups[key] = (pos, neg)
    scored = []
    for pos, neg in groups.values():
        total = pos + neg
        if total > 0.0:
            scored.append((pos / total, pos, neg))
    scored.sort()
    p_total = sum(p for _, p, _ in scored)
    n_total = sum(n for _, _, n in scored)
    merged = {}
    for score, pos, neg in scored:
        key = round(score, 12)
        mp, mn = merged.get(key, (0.0, 0.0))
        merged[key] = (mp + pos, mn + neg)
    ordered = sorted(merged.items())
    auc = 0.0
    neg_below = 0.0
    for _, (pos, neg) in ordered:
        auc += pos * (neg_below + 0.5 * neg)
        neg_below += neg
    return auc / (p_total * n_total)


def _gaussian_bayes_auc(cells, sigma, n_grid=20001):
    obs = np.array([c[0] for c in cells])
    lo, hi = obs.min() - 8 * sigma, obs.max() + 8 * sigma
    x = np.linspace(lo, hi, n_grid)
    f_pos = np.zeros_like(x)
    f_neg = np.zeros_like(x)
    for mu, w, positive in cells:
        dens = w * np.exp(-0.5 * ((x - mu) / sigma) ** 2) / (sigma * np.sqrt(2 * np.pi))
        if positive:
            f_pos += dens
        else:
            f_neg += dens
    dx = x[1] - x[0]
    wp = f_pos * dx
    wn = f_neg * dx
    score = f_pos / (f_pos + f_neg + 1e-300)
    order = np.argsort(score, kind="stable")
    wp, wn = wp[order], wn[order]
    neg_below = np.concatenate([[0.0], np.cumsum(wn)[:-1]])
    auc = np.sum(wp * (neg_below + 0.5 * wn))
    return float(auc / (wp.sum() * wn.sum()))


def context_free_auc_ceiling(spec: PhantomSpec) -> float:
    """Bayes-optimal AUC of any single-vertebra observer of this mixture."""
    cells = observation_mixture(spec)
    if spec.lesion_jitter == 0.0:
        return _discrete_bayes_auc(cells)
    return _gaussian_bayes_auc(cells, spec.lesion_jitter)


def pairwise_observation_auc(spec: PhantomSpec) -> float:
    """AUC of the raw observed contrast as the score (closed form).

    Equals the Bayes ceiling whenever the likelihood ratio is monotone in
    the observation; used as a cross-check of the quadrature path.
    """
    cells = observation_mixture(spec)
    sigma = spec.lesion_jitter
    pos = [(o, w) for o, w, y in cells if y]
    neg = [(o, w) for o, w, y in cells if not y]
    total = 0.0
    for op, wp in pos:
        for on, wn in neg:
            if sigma == 0.0:
                p = 1.0 if op > on else (0.5 if op == on else 0.0)
            else:
                p = 0.5 * (1.0 + math.erf((op - on) / (sigma * 2.0)))
            total += wp * wn * p
    wp_sum = sum(w for _, w in pos)
    wn_sum = sum(w for _, w in neg)
    return total / (wp_sum * wn_sum)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _smooth_step(d, edge=0.12):
    z = np.clip((1.0 - d) / edge, -60.0, 60.0)
    return 1.0 / (1.0 + np.exp(-z))


def _render_vertebra(spec, geom, seq: SequenceContrast, contrast_value, rng):
    """One [S,H,W] raw volume: tapered body ellipse, texture, lesion, noise."""
    s, (h, w) = spec.n_slices, spec.slice_size
    ys = np.linspace(-1.0, 1.0, h)[:, None]
    xs = np.linspace(-1.0, 1.0, w)[None, :]
    vol = np.zeros((s, h, w))

    amp = spec.texture_amp
    t_fy, t_fx, t_ph = rng.uniform(1.5, 4.0), rng.uniform(1.5, 4.0), rng.uniform(0, 2 * np.pi)
    noise = rng.normal(0.0, spec.noise_sigma, (s, h, w))

    ry = geom["ry"] * (0.6 if geom["fracture"] else 1.0)
    for k in range(s):
        zrel = 0.0 if s == 1 else (2.0 * k / (s - 1) - 1.0)
        taper = 1.0 - 0.3 * zrel * zrel
        d_body = (((ys - geom["cy"]) / (ry * taper)) ** 2
                  + ((xs - geom["cx"]) / (geom["rx"] * taper)) ** 2)
        body = _smooth_step(d_body)
        if geom["compression"]:
            d_bulge = (((ys - geom["cy"]) / (ry * 0.45)) ** 2
                       + ((xs - geom["cx"] - geom["rx"] * 0.9) / (geom["rx"] * 0.5)) ** 2)
            body = np.maximum(body, _smooth_step(d_bulge))
        texture = amp * np.cos(t_fy * ys + t_fx * xs + t_ph + 0.4 * k)
        slice_img = body * (seq.body_intensity + texture)
        if contrast_value != 0.0:
            d_les = (((k - geom["lz"]) / geom["lrz"]) ** 2
                     + ((ys - geom["ly"]) / geom["lry"]) ** 2
                     + ((xs - geom["lx"]) / geom["lrx"]) ** 2)
            lesion = _smooth_step(d_les)
            slice_img = slice_img + contrast_value * seq.lesion_sign * lesion * body
        vol[k] = slice_img
    return (vol + noise).astype(np.float32)


def _draw_geometry(spec, rng, fracture, compression):
    geom = {
        "cy": rng.uniform(-0.06, 0.06),
        "cx": rng.uniform(-0.06, 0.06),
        "ry": rng.uniform(0.52, 0.62),
        "rx": rng.uniform(0.42, 0.52),
        "fracture": fracture,
        "compression": compression,
    }
    geom["ly"] = geom["cy"] + rng.uniform(-0.4, 0.4) * geom["ry"]
    geom["lx"] = geom["cx"] + rng.uniform(-0.4, 0.4) * geom["rx"]
    geom["lry"] = rng.uniform(0.16, 0.26)
    geom["lrx"] = rng.uniform(0.16, 0.26)
    if spec.lesion_slice_extent is not None:
        geom["lz"] = float(rng.integers(spec.n_slices))
        geom["lrz"] = 0.45 * spec.lesion_slice_extent
    else:
        geom["lz"] = rng.uniform(0, spec.n_slices - 1) if spec.n_slices > 1 else 0.0
        geom["lrz"] = rng.uniform(0.8, 1.4)
    return geom


def _report_annotation(study_id, spec, rng, levels, labels, contrasts):
    conditions = {}
    for cond in ("metastasis", "fracture", "compression"):
        codes = labels[cond]
        positives = [levels[i] for i in np.where(codes == 1)[0]]
        if cond == "compression":
            conditions[cond] = ConditionAnnotation(positive=frozenset(positives))
            continue
        explicit = set()
        if positives:
            if cond == "metastasis":
                pos_idx = np.where(codes == 1)[0]
                anchor = levels[pos_idx[int(np.argmax(contrasts[pos_idx]))]]
            else:
                anchor = positives[0]
            explicit.add(anchor)
            for lvl in positives:
                if lvl != anchor and rng.random() < spec.report_explicit_prob:
                    explicit.add(lvl)
        negatives = {
            levels[i]
            for i in np.where(codes == 0)[0]
            if rng.random() < spec.report_negative_prob
        }
        conditions[cond] = ConditionAnnotation(
            widespread=len(explicit) < len(positives),
            positive=frozenset(explicit),
            negative=frozenset(negatives),
        )
    return AnnotationRecord(study_id=study_id, conditions=conditions)


def generate_phantom_study(spec: PhantomSpec, seed, index, split="train",
                           with_report=True) -> StudySample:
    """Deterministic per (seed, index): parallel and serial generation agree."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))
    n_vert = spec.n_vertebrae
    vocab = list(spec.level_vocabulary)
    if n_vert > len(vocab):
        raise ValueError(f"n_vertebrae {n_vert} exceeds vocabulary size {len(vocab)}")
    start = int(rng.integers(0, len(vocab) - n_vert + 1))
    levels = vocab[start : start + n_vert]

    b = int(rng.random() < spec.p_baseline)
    contrast_levels = np.zeros(n_vert, dtype=np.int64)
    clean = rng.choice(n_vert, size=spec.n_clean(), replace=False)
    lesioned = np.setdiff1d(np.arange(n_vert), clean)
    if lesioned.size:
        contrast_levels[lesioned] = rng.choice(
            [1, 2, 3], size=lesioned.size, p=spec.lesion_level_probs
        )
    jitter = (
        rng.normal(0.0, spec.lesion_jitter, n_vert)
        if spec.lesion_jitter > 0.0
        else np.zeros(n_vert)
    )
    fracture = rng.random(n_vert) < spec.p_fracture
    compression = rng.random(n_vert) < spec.p_compression

    geoms = [
        _draw_geometry(spec, rng, bool(fracture[v]), bool(compression[v]))
        for v in range(n_vert)
    ]

    observed = spec.offset_scale * b + contrast_levels + jitter
    raw = {}
    volumes = {}
    for v in range(n_vert):
        for c, seq in enumerate(spec.sequences):
            vol = _render_vertebra(spec, geoms[v], seq, float(observed[v]), rng)
            raw[(v, c)] = vol
            volumes[(v, c)] = normalize_volume(vol)

    labels = {
        "metastasis": (contrast_levels >= POSITIVE_THRESHOLD).astype(np.int8),
        "fracture": fracture.astype(np.int8),
        "compression": compression.astype(np.int8),
    }
    bag = {cond: int(codes.any()) for cond, codes in labels.items()}

    annotation = None
    labels_report = {}
    if with_report:
        annotation = _report_annotation(
            f"study{index:05d}", spec, rng, levels, labels, contrast_levels
        )
        from .labels import derive_labels

        labels_report = derive_labels(annotation, levels).vertebra

    n_chan = len(spec.sequences)
    study = StudySample(
        study_id=f"study{index:05d}",
        split=split,
        levels=levels,
        sequences=[s.name for s in spec.sequences],
        level_idx=np.array([vocab.index(l) for l in levels], dtype=np.intp),
        seq_idx=np.arange(n_chan, dtype=np.intp),
        present=np.ones((n_vert, n_chan), dtype=bool),
        volumes=volumes,
        labels_exhaustive=labels,
        labels_report=labels_report,
        bag_labels=bag,
        annotation=annotation,
        truth={
            "baseline_offset": b,
            "lesion_contrast": contrast_levels.tolist(),
            "observed_contrast": [float(x) for x in observed],
            "lesion_slice": [g["lz"] for g in geoms],
        },
    )
    study.raw_volumes = raw
    return study


GRADING_CLASS_COUNTS = {
    "pfirrmann": 5,
    "disc_narrowing": 4,
    "central_canal_stenosis": 2,
    "spondylolisthesis": 2,
    "endplate_defect_upper": 2,
    "endplate_defect_lower": 2,
    "marrow_change_upper": 2,
    "marrow_change_lower": 2,
}


def attach_random_grading(study, rng, missing_prob=0.1):
    """Synthetic grading labels for plumbing tests; -1 marks missing."""
    n = study.n_vertebrae()
    grading = {}
    for task, k in GRADING_CLASS_COUNTS.items():
        vals = rng.integers(0, k, size=n)
        missing = rng.random(n) < missing_prob
        vals = np.where(missing, -1, vals)
        grading[task] = vals.astype(np.int64)
    study.grading = grading
    return study


def generate_dataset(spec: PhantomSpec, n_train, n_val, n_test, seed,
                     registry="cancer", with_report=True):
    """Phantom studies for all splits plus a label-count ledger."""
    from .datasets import count_labels

    studies = []
    counts = [("train", n_train), ("val", n_val), ("test", n_test)]
    index = 0
    for split, n in counts:
        for _ in range(n):
            study = generate_phantom_study(spec, seed, index, split, with_report)
            if registry == "grading":
                grng = np.random.default_rng(
                    np.random.SeedSequence([int(seed), int(index), 7])
                )
                attach_random_grading(study, grng)
            studies.append(study)
            index += 1
    ledger = {
        "exhaustive": count_labels(studies, "exhaustive"),
        "report": count_labels(studies, "report") if with_report else {},
    }
    return studies, ledger
