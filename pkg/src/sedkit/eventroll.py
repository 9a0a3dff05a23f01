"""Event annotations, class vocabularies and frame-level event rolls.

An event roll is an ``N x M`` binary matrix where entry ``(n, m)`` is 1 when
class ``m`` is active in frame ``n``. Frame ``n`` starts at ``n * hop`` and is
considered active for an event when ``onset <= n * hop < offset``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "AnnotationError",
    "EncodingError",
    "EventAnnotation",
    "ClipAnnotations",
    "Vocabulary",
    "FrameParams",
    "EventRoll",
    "CorpusStats",
    "parse_annotations",
    "format_annotations",
    "build_vocabulary",
    "frame_span",
    "encode_roll",
    "duration_stats",
]

# Relative slack when snapping event boundaries onto the hop grid; text
# timestamps such as 1.14 are not exact multiples of 0.02 in binary.
_GRID_EPS = 1e-9


class AnnotationError(ValueError):
    """Raised for malformed annotation files."""


class EncodingError(ValueError):
    """Raised when an annotation cannot be encoded against a vocabulary."""


@dataclass(frozen=True)
class EventAnnotation:
    onset: float
    offset: float
    label: str

    def __post_init__(self):
        if not self.label:
            raise ValueError("event label must be non-empty")
        if self.onset < 0:
            raise ValueError(f"negative onset {self.onset}")
        if not self.offset > self.onset:
            raise ValueError(f"offset {self.offset} must exceed onset {self.onset}")

    @property
    def duration(self) -> float:
        return self.offset - self.onset


@dataclass(frozen=True)
class ClipAnnotations:
    clip_id: str
    duration: float
    events: tuple[EventAnnotation, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))

    def labels(self) -> set[str]:
        return {e.label for e in self.events}


@dataclass(frozen=True)
class Vocabulary:
    classes: tuple[str, ...] = ()

    def __post_init__(self):
        classes = tuple(self.classes)
        if list(classes) != sorted(set(classes)):
            raise ValueError("vocabulary must be sorted and free of duplicates")
        object.__setattr__(self, "classes", classes)

    def __len__(self) -> int:
        return len(self.classes)

    def __iter__(self):
        return iter(self.classes)

    def index(self, label: str) -> int:
        try:
            return self.classes.index(label)
        except ValueError:
            raise EncodingError(f"label {label!r} is not in the vocabulary") from None


@dataclass(frozen=True)
class FrameParams:
    window: float = 0.040
    hop: float = 0.020

    def __post_init__(self):
        if not 0 < self.hop <= self.window:
            raise ValueError(f"need 0 < hop <= window, got hop={self.hop}, window={self.window}")

    def n_frames(self, duration: float) -> int:
        """Number of complete analysis windows that fit in ``duration`` seconds."""
        if duration < self.window:
            return 0
        return int(math.floor((duration - self.window) / self.hop + _GRID_EPS)) + 1

    def span(self, n_frames: int) -> float:
        """Audio duration covered by ``n_frames`` analysis windows."""
        if n_frames <= 0:
            return 0.0
        return (n_frames - 1) * self.hop + self.window


@dataclass(frozen=True)
class EventRoll:
    activity: np.ndarray

    def __post_init__(self):
        act = np.asarray(self.activity)
        if act.ndim != 2:
            raise ValueError(f"event roll must be 2-D, got shape {act.shape}")
        if act.size and not np.isin(act, (0, 1)).all():
            raise ValueError("event roll entries must be 0 or 1")
        act = act.astype(np.uint8)
        act.setflags(write=False)
        object.__setattr__(self, "activity", act)

    @classmethod
    def zeros(cls, n_frames: int, n_classes: int) -> "EventRoll":
        return cls(np.zeros((n_frames, n_classes), dtype=np.uint8))

    @property
    def n_frames(self) -> int:
        return self.activity.shape[0]

    @property
    def n_classes(self) -> int:
        return self.activity.shape[1]

    def frame_counts(self) -> np.ndarray:
        """Active-frame count per class."""
        return self.activity.sum(axis=0, dtype=np.int64)

    def __eq__(self, other):
        if not isinstance(other, EventRoll):
            return NotImplemented
        return self.activity.shape == other.activity.shape and bool(
            np.array_equal(self.activity, other.activity)
        )

    __hash__ = None


@dataclass
class CorpusStats:
    classes: tuple[str, ...]
    mean_duration: np.ndarray
    instances: np.ndarray
    frames: np.ndarray = field(repr=False)

    def to_tsv(self) -> str:
        lines = ["class\tmean_duration_s\tinstances\tframes"]
        for name, dur, cnt, frm in zip(self.classes, self.mean_duration, self.instances, self.frames):
            lines.append(f"{name}\t{dur:.3f}\t{int(cnt)}\t{int(frm)}")
        return "\n".join(lines) + "\n"


def _parse_seconds(token: str, lineno: int, what: str) -> float:
    try:
        value = float(token)
    except ValueError:
        raise AnnotationError(f"line {lineno}: non-numeric {what} {token!r}") from None
    if not math.isfinite(value):
        raise AnnotationError(f"line {lineno}: non-finite {what} {token!r}")
    return value


def parse_annotations(text: str, clip_duration: float, clip_id: str = "") -> ClipAnnotations:
    """Parse tab-separated event annotations.

    Each non-empty line holds either ``onset, offset, label`` or the
    five-column TUT layout ``filename, scene, onset, offset, label``. All lines
    of a file must use the same layout.
    """
    events = []
    n_cols = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) not in (3, 5):
            raise AnnotationError(f"line {lineno}: expected 3 or 5 tab-separated columns, got {len(cols)}")
        if n_cols is None:
            n_cols = len(cols)
        elif len(cols) != n_cols:
            raise AnnotationError(f"line {lineno}: expected {n_cols} columns like the first line, got {len(cols)}")
        onset_s, offset_s, label = cols[-3:]
        onset = _parse_seconds(onset_s, lineno, "onset")
        offset = _parse_seconds(offset_s, lineno, "offset")
        label = label.strip()
        if onset < 0:
            raise AnnotationError(f"line {lineno}: negative onset {onset}")
        if not offset > onset:
            raise AnnotationError(f"line {lineno}: offset {offset} does not exceed onset {onset}")
        if not label:
            raise AnnotationError(f"line {lineno}: empty label")
        events.append(EventAnnotation(onset, offset, label))
    return ClipAnnotations(clip_id, clip_duration, tuple(events))


def format_annotations(clip: ClipAnnotations) -> str:
    """Serialize to the three-column layout read by :func:`parse_annotations`."""
    return "".join(f"{e.onset:.6f}\t{e.offset:.6f}\t{e.label}\n" for e in clip.events)


def build_vocabulary(annotations: Iterable[ClipAnnotations]) -> Vocabulary:
    labels: set[str] = set()
    for clip in annotations:
        labels |= clip.labels()
    return Vocabulary(tuple(sorted(labels)))


def _grid_ceil(t: float, hop: float) -> int:
    q = t / hop
    r = round(q)
    if abs(q - r) <= _GRID_EPS * max(1.0, abs(q)):
        return int(r)
    return int(math.ceil(q))


def frame_span(onset: float, offset: float, hop: float) -> tuple[int, int]:
    """Half-open frame-index range ``[start, stop)`` whose frame starts lie in ``[onset, offset)``."""
    return _grid_ceil(onset, hop), _grid_ceil(offset, hop)


def _clamped(event: EventAnnotation, duration: float, clip_id: str) -> tuple[float, float]:
    offset = event.offset
    if offset > duration + 1e-6:
        warnings.warn(
            f"clip {clip_id!r}: event {event.label!r} ends at {offset} past clip end {duration}; clamping",
            stacklevel=3,
        )
        offset = duration
    return event.onset, min(offset, duration)


def encode_roll(clip: ClipAnnotations, vocab: Vocabulary, fp: FrameParams, n_frames: int) -> EventRoll:
    act = np.zeros((n_frames, len(vocab)), dtype=np.uint8)
    for event in clip.events:
        m = vocab.index(event.label)
        onset, offset = _clamped(event, clip.duration, clip.clip_id)
        start, stop = frame_span(onset, offset, fp.hop)
        start, stop = max(start, 0), min(stop, n_frames)
        if stop > start:
            act[start:stop, m] = 1
    return EventRoll(act)


def duration_stats(annotations: Sequence[ClipAnnotations], vocab: Vocabulary, fp: FrameParams) -> CorpusStats:
    """Per-class mean instance duration, instance count and active-frame total."""
    m = len(vocab)
    total_dur = np.zeros(m)
    instances = np.zeros(m, dtype=np.int64)
    frames = np.zeros(m, dtype=np.int64)
    for clip in annotations:
        for event in clip.events:
            k = vocab.index(event.label)
            onset, offset = _clamped(event, clip.duration, clip.clip_id)
            start, stop = frame_span(onset, offset, fp.hop)
            total_dur[k] += event.offset - event.onset
            instances[k] += 1
            frames[k] += max(stop - start, 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(instances > 0, total_dur / np.maximum(instances, 1), 0.0)
    return CorpusStats(vocab.classes, mean, instances, frames)
