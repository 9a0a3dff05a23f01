"""Thresholding, event decoding and segment-based detection metrics.

Frame activity is pooled into fixed-length segments; a class is active in a
segment when any frame starting inside it is active. Counts pool over all
segments of all clips before scores are formed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .eventroll import EventAnnotation, EventRoll, FrameParams, Vocabulary

__all__ = [
    "SegmentParams",
    "SegmentCounts",
    "EvalReport",
    "threshold",
    "roll_to_events",
    "segmentize",
    "count_segments",
    "report",
    "evaluate",
    "evaluate_corpus",
    "f_score",
    "macro_f",
]


@dataclass(frozen=True)
class SegmentParams:
    segment_length: float = 1.0

    def __post_init__(self):
        if not self.segment_length > 0:
            raise ValueError("segment length must be positive")


def threshold(probabilities, phi: float = 0.5) -> EventRoll:
    """Binarize: an entry is active when its probability is at least ``phi``."""
    p = np.asarray(probabilities, dtype=np.float64)
    return EventRoll((p >= phi).astype(np.uint8))


def roll_to_events(roll: EventRoll, fp: FrameParams, vocab: Vocabulary) -> list[EventAnnotation]:
    """Turn each maximal run of active frames into one event, ordered by onset."""
    if roll.n_classes != len(vocab):
        raise ValueError(f"roll has {roll.n_classes} classes, vocabulary {len(vocab)}")
    events = []
    padded = np.zeros((roll.n_frames + 2, roll.n_classes), dtype=np.int8)
    padded[1:-1] = roll.activity
    edges = np.diff(padded, axis=0)
    for m, label in enumerate(vocab.classes):
        starts = np.flatnonzero(edges[:, m] == 1)
        stops = np.flatnonzero(edges[:, m] == -1)
        for a, b in zip(starts, stops):
            # rounding strips float noise such as 7 * 0.02 = 0.14000000000000001
            events.append(EventAnnotation(round(float(a * fp.hop), 9), round(float(b * fp.hop), 9), label))
    events.sort(key=lambda e: (e.onset, e.label))
    return events


def segmentize(roll: EventRoll, fp: FrameParams, sp: SegmentParams = SegmentParams()) -> np.ndarray:
    """Segment-level activity, shape ``(K, M)`` with ``K = ceil(N * hop / segment_length)``."""
    n = roll.n_frames
    k = int(math.ceil(n * fp.hop / sp.segment_length - 1e-9)) if n else 0
    seg = np.zeros((k, roll.n_classes), dtype=bool)
    if n == 0:
        return seg
    # segment index of each frame start, snapped onto the grid
    q = np.arange(n) * fp.hop / sp.segment_length
    r = np.round(q)
    idx = np.where(np.abs(q - r) <= 1e-9 * np.maximum(1.0, q), r, np.floor(q)).astype(np.int64)
    np.logical_or.at(seg, idx, roll.activity.astype(bool))
    return seg


@dataclass
class SegmentCounts:
    """Counts accumulated over segments, pooled across clips with ``+``."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    ref: np.ndarray  # per-class reference-active segments
    substitutions: np.ndarray  # per segment
    deletions: np.ndarray
    insertions: np.ndarray
    ref_per_segment: np.ndarray

    def __add__(self, other: "SegmentCounts") -> "SegmentCounts":
        return SegmentCounts(
            self.tp + other.tp,
            self.fp + other.fp,
            self.fn + other.fn,
            self.ref + other.ref,
            np.concatenate([self.substitutions, other.substitutions]),
            np.concatenate([self.deletions, other.deletions]),
            np.concatenate([self.insertions, other.insertions]),
            np.concatenate([self.ref_per_segment, other.ref_per_segment]),
        )

    @classmethod
    def empty(cls, n_classes: int) -> "SegmentCounts":
        z = np.zeros(n_classes, dtype=np.int64)
        e = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), z.copy(), z.copy(), e, e.copy(), e.copy(), e.copy())


def count_segments(ref_seg: np.ndarray, pred_seg: np.ndarray) -> SegmentCounts:
    ref_seg = np.asarray(ref_seg, dtype=bool)
    pred_seg = np.asarray(pred_seg, dtype=bool)
    if ref_seg.shape != pred_seg.shape:
        raise ValueError(f"reference {ref_seg.shape} and prediction {pred_seg.shape} shapes differ")
    tp_mat = ref_seg & pred_seg
    fp_mat = pred_seg & ~ref_seg
    fn_mat = ref_seg & ~pred_seg
    fn_k = fn_mat.sum(axis=1, dtype=np.int64)
    fp_k = fp_mat.sum(axis=1, dtype=np.int64)
    s = np.minimum(fn_k, fp_k)
    return SegmentCounts(
        tp=tp_mat.sum(axis=0, dtype=np.int64),
        fp=fp_mat.sum(axis=0, dtype=np.int64),
        fn=fn_mat.sum(axis=0, dtype=np.int64),
        ref=ref_seg.sum(axis=0, dtype=np.int64),
        substitutions=s,
        deletions=fn_k - s,
        insertions=fp_k - s,
        ref_per_segment=ref_seg.sum(axis=1, dtype=np.int64),
    )


def f_score(tp, fp, fn) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def macro_f(per_class_f) -> float:
    """Unweighted mean over every class, zero-scoring classes included."""
    values = np.asarray(per_class_f, dtype=np.float64)
    return float(values.mean()) if values.size else 0.0


@dataclass
class EvalReport:
    classes: tuple[str, ...]
    f: np.ndarray
    er: np.ndarray
    undefined: np.ndarray  # classes with no reference-active segment
    macro_f: float
    micro_f: float
    overall_er: float
    counts: SegmentCounts

    def to_tsv(self) -> str:
        lines = ["class\tF\tER"]
        for name, f, er, undef in zip(self.classes, self.f, self.er, self.undefined):
            lines.append(f"{name}\t{f:.6f}\t{er:.6f}" + ("\tundefined" if undef else ""))
        lines += [
            "",
            f"macro_F\t{self.macro_f:.6f}",
            f"micro_F\t{self.micro_f:.6f}",
            f"overall_ER\t{self.overall_er:.6f}",
        ]
        return "\n".join(lines) + "\n"

    def to_keyvalue(self) -> str:
        lines = [
            f"macro_F = {self.macro_f:.10g}",
            f"micro_F = {self.micro_f:.10g}",
            f"overall_ER = {self.overall_er:.10g}",
        ]
        for name, f, er, undef in zip(self.classes, self.f, self.er, self.undefined):
            key = name.replace(" ", "_")
            lines += [f"F.{key} = {f:.10g}", f"ER.{key} = {er:.10g}", f"undefined.{key} = {int(undef)}"]
        return "\n".join(lines) + "\n"


def _ratio(num, den) -> float:
    if den:
        return num / den
    return 0.0 if num == 0 else math.inf


def report(counts: SegmentCounts, classes=None) -> EvalReport:
    m = counts.tp.size
    classes = tuple(classes) if classes is not None else tuple(str(i) for i in range(m))
    f = np.array([f_score(counts.tp[i], counts.fp[i], counts.fn[i]) for i in range(m)])
    er = np.array([_ratio(counts.fn[i] + counts.fp[i], counts.ref[i]) for i in range(m)])
    errors = int(counts.substitutions.sum() + counts.deletions.sum() + counts.insertions.sum())
    return EvalReport(
        classes=classes,
        f=f,
        er=er,
        undefined=counts.ref == 0,
        macro_f=macro_f(f),
        micro_f=f_score(counts.tp.sum(), counts.fp.sum(), counts.fn.sum()),
        overall_er=_ratio(errors, int(counts.ref_per_segment.sum())),
        counts=counts,
    )


def evaluate(
    ref: EventRoll, pred: EventRoll, fp: FrameParams, sp: SegmentParams = SegmentParams(), classes=None
) -> EvalReport:
    if ref.activity.shape != pred.activity.shape:
        raise ValueError(f"reference {ref.activity.shape} and prediction {pred.activity.shape} shapes differ")
    return report(count_segments(segmentize(ref, fp, sp), segmentize(pred, fp, sp)), classes)


def evaluate_corpus(pairs, fp: FrameParams, sp: SegmentParams = SegmentParams(), classes=None) -> EvalReport:
    """Pool segment counts over ``(ref, pred)`` roll pairs, then score."""
    total = None
    for ref, pred in pairs:
        if ref.activity.shape != pred.activity.shape:
            raise ValueError("reference and prediction shapes differ")
        c = count_segments(segmentize(ref, fp, sp), segmentize(pred, fp, sp))
        total = c if total is None else total + c
    if total is None:
        total = SegmentCounts.empty(len(classes) if classes is not None else 0)
    return report(total, classes)
