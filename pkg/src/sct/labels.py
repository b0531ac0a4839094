"""Report-style annotation records and per-vertebra label derivation.

Structured annotations carry, per condition, a widespread/ambiguity flag
plus explicit positive and negative level sets. Label derivation turns a
record into per-vertebra {positive, negative, unknown} codes and a per-study
bag label.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# anatomical order, caudal to cranial
DEFAULT_LEVELS = (
    "S1", "L5", "L4", "L3", "L2", "L1",
    "T12", "T11", "T10", "T9", "T8", "T7", "T6", "T5", "T4", "T3", "T2", "T1",
    "C7", "C6", "C5", "C4", "C3", "C2",
)

CONDITIONS = ("metastasis", "fracture", "compression")

# per-vertebra label codes
POSITIVE = 1
NEGATIVE = 0
UNKNOWN = -1


class AnnotationError(ValueError):
    """Annotation record violates its invariants."""


@dataclass
class ConditionAnnotation:
    widespread: bool = False
    positive: frozenset = frozenset()
    negative: frozenset = frozenset()

    def __post_init__(self):
        self.positive = frozenset(self.positive)
        self.negative = frozenset(self.negative)
        overlap = self.positive & self.negative
        if overlap:
            raise AnnotationError(
                f"levels marked both positive and negative: {sorted(overlap)}"
            )

    def to_dict(self):
        return {
            "widespread": self.widespread,
            "positive": sorted(self.positive),
            "negative": sorted(self.negative),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            widespread=bool(d.get("widespread", False)),
            positive=frozenset(d.get("positive", ())),
            negative=frozenset(d.get("negative", ())),
        )


@dataclass
class AnnotationRecord:
    study_id: str
    conditions: dict = field(default_factory=dict)  # condition -> ConditionAnnotation

    def to_dict(self):
        return {name: ann.to_dict() for name, ann in sorted(self.conditions.items())}

    @classmethod
    def from_dict(cls, study_id, d):
        return cls(
            study_id=study_id,
            conditions={k: ConditionAnnotation.from_dict(v) for k, v in d.items()},
        )


@dataclass
class LabelTriple:
    """Per-vertebra codes (1/0/-1) and a bag label per condition."""

    vertebra: dict  # condition -> np.ndarray int8 [N]
    bag: dict       # condition -> 0/1

    def unknown_count(self, condition):
        return int(np.sum(self.vertebra[condition] == UNKNOWN))


def derive_labels(record: AnnotationRecord, vertebra_levels,
                  spread_unknown_on_positive=False) -> LabelTriple:
    """Turn one annotation record into per-vertebra and bag labels.

    Metastasis/fracture: explicit marks win; unmarked levels become unknown
    when the condition is flagged widespread (or, with
    ``spread_unknown_on_positive``, whenever any explicit positive exists),
    and negative otherwise. Compression is negative unless explicitly
    positive: a condition severe enough that silence means absence. The bag
    label is positive iff any explicit positive or the widespread flag.
    """
    levels = list(vertebra_levels)
    index = {lvl: i for i, lvl in enumerate(levels)}
    vertebra = {}
    bag = {}
    for condition in CONDITIONS:
        ann = record.conditions.get(condition, ConditionAnnotation())
        for lvl in ann.positive | ann.negative:
            if lvl not in index:
                raise AnnotationError(
                    f"{record.study_id}: level {lvl!r} for {condition} "
                    f"not in vertebra list"
                )
        codes = np.full(len(levels), NEGATIVE, dtype=np.int8)
        if condition != "compression":
            spread = ann.widespread or (spread_unknown_on_positive and ann.positive)
            if spread:
                codes[:] = UNKNOWN
        for lvl in ann.negative:
            codes[index[lvl]] = NEGATIVE
        for lvl in ann.positive:
            codes[index[lvl]] = POSITIVE
        vertebra[condition] = codes
        bag[condition] = int(bool(ann.positive) or ann.widespread)
    return LabelTriple(vertebra=vertebra, bag=bag)
