"""Synthetic imbalanced corpora generated directly in log-mel feature space.

Two kinds of sound classes are modelled. Stationary classes lay one fixed
spectral profile over their whole (long) span. Transient classes are short
and pass through attack, decay and release phases, each with its own
profile, so their frames vary much more. Clips are drawn from per-clip
random substreams, so any clip can be regenerated from ``(seed, index)``.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .eventroll import (
    ClipAnnotations,
    CorpusStats,
    EventAnnotation,
    EventRoll,
    FrameParams,
    Vocabulary,
    duration_stats,
    encode_roll,
    frame_span,
)

__all__ = [
    "Band",
    "ClassSpec",
    "SynthSpec",
    "SynthCorpus",
    "default_spec",
    "class_profiles",
    "generate_clip",
    "generate_corpus",
    "parse_spec",
    "format_spec",
]

STATIONARY = "stationary"
TRANSIENT = "transient"
# fraction of a transient span spent in attack and decay; release takes the rest
PHASE_SPLIT = (0.2, 0.3)


@dataclass(frozen=True)
class Band:
    """Gaussian bump over mel bands: ``amplitude * exp(-0.5 * ((k - center) / width) ** 2)``."""

    center: float
    width: float
    amplitude: float


@dataclass(frozen=True)
class ClassSpec:
    name: str
    kind: str
    median_duration: float
    sigma: float
    rate: float
    # stationary: one profile; transient: attack, decay, release profiles
    profiles: tuple[tuple[Band, ...], ...]
    noise: float = 0.1
    gain_jitter: float = 0.0

    def __post_init__(self):
        if self.kind not in (STATIONARY, TRANSIENT):
            raise ValueError(f"{self.name}: unknown template kind {self.kind!r}")
        if not self.median_duration > 0:
            raise ValueError(f"{self.name}: median duration must be positive")
        if self.rate < 0 or self.sigma < 0 or self.noise < 0:
            raise ValueError(f"{self.name}: rate, sigma and noise must be non-negative")
        want = 1 if self.kind == STATIONARY else 3
        if len(self.profiles) != want:
            raise ValueError(f"{self.name}: {self.kind} class needs {want} profile(s)")


@dataclass(frozen=True)
class SynthSpec:
    classes: tuple[ClassSpec, ...]
    clip_length: float = 10.0
    n_clips: int = 200
    n_mels: int = 64
    background_level: float = 0.0
    background_noise: float = 1.0
    seed: int = 0
    frame: FrameParams = field(default_factory=FrameParams)

    def __post_init__(self):
        if not self.classes:
            raise ValueError("a synthetic spec needs at least one class")
        if not self.clip_length > 0:
            raise ValueError("clip length must be positive")
        names = [c.name for c in self.classes]
        if len(set(names)) != len(names):
            raise ValueError("class names must be unique")

    @property
    def vocabulary(self) -> Vocabulary:
        return Vocabulary(tuple(sorted(c.name for c in self.classes)))

    @property
    def n_frames(self) -> int:
        return self.frame.n_frames(self.clip_length)


@dataclass
class SynthCorpus:
    spec: SynthSpec
    vocab: Vocabulary
    features: list[np.ndarray]
    rolls: list[EventRoll]
    annotations: list[ClipAnnotations]
    stats: CorpusStats

    @property
    def dataset(self) -> list[tuple[np.ndarray, EventRoll]]:
        return list(zip(self.features, self.rolls))


def default_spec(n_clips: int = 200, seed: int = 0) -> SynthSpec:
    """Two long stationary classes and four short multi-phase transient classes."""
    stationary = [
        ClassSpec("hum", STATIONARY, 8.0, 0.3, 0.6, ((Band(6, 2.5, 1.2), Band(20, 3, 0.6)),), noise=0.3),
        ClassSpec("engine", STATIONARY, 8.0, 0.3, 0.6, ((Band(28, 6, 1.0),),), noise=0.3),
    ]
    transient = [
        ClassSpec(
            "knock", TRANSIENT, 0.3, 0.5, 1.0,
            ((Band(10, 4, 1.6),), (Band(22, 5, 1.0),), (Band(14, 3, 0.6),)),
            noise=0.5, gain_jitter=0.3,
        ),
        ClassSpec(
            "click", TRANSIENT, 0.3, 0.5, 1.0,
            ((Band(50, 3, 1.6),), (Band(40, 4, 1.0),), (Band(56, 3, 0.6),)),
            noise=0.5, gain_jitter=0.3,
        ),
        ClassSpec(
            "clatter", TRANSIENT, 0.3, 0.5, 1.0,
            ((Band(36, 3, 1.4), Band(46, 3, 0.8)), (Band(32, 6, 1.0),), (Band(44, 5, 0.6),)),
            noise=0.5, gain_jitter=0.3,
        ),
        ClassSpec(
            "snap", TRANSIENT, 0.3, 0.5, 1.0,
            ((Band(60, 2, 1.6),), (Band(18, 4, 1.0),), (Band(30, 3, 0.6),)),
            noise=0.5, gain_jitter=0.3,
        ),
    ]
    return SynthSpec(tuple(stationary + transient), n_clips=n_clips, seed=seed)


def _profile(bands: tuple[Band, ...], n_mels: int) -> np.ndarray:
    k = np.arange(n_mels, dtype=np.float64)
    out = np.zeros(n_mels)
    for b in bands:
        out += b.amplitude * np.exp(-0.5 * ((k - b.center) / b.width) ** 2)
    return out


def class_profiles(cls: ClassSpec, n_mels: int) -> list[np.ndarray]:
    return [_profile(bands, n_mels) for bands in cls.profiles]


def _phase_bounds(length: int) -> list[tuple[int, int]]:
    if length < 3:
        cuts = [min(length, 1), length]
    else:
        a = max(1, round(PHASE_SPLIT[0] * length))
        d = max(1, round(PHASE_SPLIT[1] * length))
        cuts = [a, min(a + d, length - 1)]
    return [(0, cuts[0]), (cuts[0], cuts[1]), (cuts[1], length)]


def _transient_envelope(length: int) -> list[np.ndarray]:
    """Attack rises to full scale, decay falls to half, release falls to zero."""
    envs = []
    for (lo, hi), (e0, e1) in zip(_phase_bounds(length), ((0.3, 1.0), (1.0, 0.5), (0.5, 0.1))):
        n = hi - lo
        envs.append(np.linspace(e0, e1, n) if n > 1 else np.full(n, e1 if n else 0.0))
    return envs


def _merge(intervals: list[tuple[float, float]]) -> list[tuple[float, float]]:
    merged: list[list[float]] = []
    for on, off in sorted(intervals):
        if merged and on <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], off)
        else:
            merged.append([on, off])
    return [(a, b) for a, b in merged]


def generate_clip(spec: SynthSpec, clip_index: int):
    """Return ``(features, roll, annotations)`` for one clip."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, clip_index]))
    n = spec.n_frames
    hop = spec.frame.hop
    feats = spec.background_level + spec.background_noise * rng.standard_normal((n, spec.n_mels))
    events = []
    for cls in spec.classes:
        profiles = class_profiles(cls, spec.n_mels)
        placed = []
        for _ in range(rng.poisson(cls.rate)):
            dur = min(cls.median_duration * math.exp(cls.sigma * rng.standard_normal()), spec.clip_length)
            onset = round(rng.uniform(0.0, spec.clip_length - dur), 6)
            offset = round(min(onset + dur, spec.clip_length), 6)
            if offset <= onset:
                continue
            placed.append((onset, offset))
            start, stop = frame_span(onset, offset, hop)
            stop = min(stop, n)
            length = stop - start
            if length <= 0:
                continue
            gain = 1.0 + cls.gain_jitter * rng.uniform(-1.0, 1.0)
            if cls.kind == STATIONARY:
                layer = np.broadcast_to(profiles[0], (length, spec.n_mels))
            else:
                layer = np.concatenate(
                    [env[:, None] * prof for env, prof in zip(_transient_envelope(length), profiles)]
                )
            feats[start:stop] += gain * layer + cls.noise * rng.standard_normal((length, spec.n_mels))
        events += [EventAnnotation(a, b, cls.name) for a, b in _merge(placed)]
    events.sort(key=lambda e: (e.onset, e.label))
    clip = ClipAnnotations(f"clip{clip_index:05d}", spec.clip_length, tuple(events))
    roll = encode_roll(clip, spec.vocabulary, spec.frame, n)
    return feats, roll, clip


def generate_corpus(spec: SynthSpec, indices=None) -> SynthCorpus:
    if spec.n_clips < 1:
        raise ValueError("n_clips must be at least 1")
    indices = range(spec.n_clips) if indices is None else indices
    feats, rolls, anns = [], [], []
    for i in indices:
        f, r, a = generate_clip(spec, i)
        feats.append(f)
        rolls.append(r)
        anns.append(a)
    vocab = spec.vocabulary
    return SynthCorpus(spec, vocab, feats, rolls, anns, duration_stats(anns, vocab, spec.frame))


# ---------------------------------------------------------------------------
# spec files
#
#   [corpus]
#   clip_length = 10
#   n_clips = 200
#   seed = 0
#   background_noise = 1.0
#
#   [class:knock]
#   kind = transient
#   median_duration = 0.3
#   sigma = 0.5
#   rate = 1.5
#   noise = 0.5
#   gain_jitter = 0.3
#   attack = 10:4:1.6
#   decay = 22:5:1.0
#   release = 14:3:0.6
#
# Stationary classes give a single ``profile`` key instead of the three
# phases. A profile is a comma-separated list of ``center:width:amplitude``.

_PHASES = ("attack", "decay", "release")


def _parse_bands(text: str) -> tuple[Band, ...]:
    bands = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        parts = item.split(":")
        if len(parts) != 3:
            raise ValueError(f"bad band {item!r}; expected center:width:amplitude")
        bands.append(Band(*(float(p) for p in parts)))
    return tuple(bands)


def _format_bands(bands: tuple[Band, ...]) -> str:
    return ", ".join(f"{b.center:g}:{b.width:g}:{b.amplitude:g}" for b in bands)


def parse_spec(text: str) -> SynthSpec:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ValueError(f"malformed spec file: {exc}") from None
    if "corpus" in cp:
        sec = cp["corpus"]
        base = dict(
            clip_length=sec.getfloat("clip_length", 10.0),
            n_clips=sec.getint("n_clips", 200),
            n_mels=sec.getint("n_mels", 64),
            background_level=sec.getfloat("background_level", 0.0),
            background_noise=sec.getfloat("background_noise", 1.0),
            seed=sec.getint("seed", 0),
        )
        unknown = set(sec) - set(base)
        if unknown:
            raise ValueError(f"unknown [corpus] keys: {sorted(unknown)}")
    else:
        base = {}
    classes = []
    for name in cp.sections():
        if name == "corpus":
            continue
        if not name.startswith("class:"):
            raise ValueError(f"unknown section [{name}]")
        sec = cp[name]
        kind = sec.get("kind", STATIONARY)
        keys = ("profile",) if kind == STATIONARY else _PHASES
        missing = [k for k in keys if k not in sec]
        if kind not in (STATIONARY, TRANSIENT) or missing:
            raise ValueError(f"[{name}]: kind {kind!r} needs keys {', '.join(keys)}")
        profiles = tuple(_parse_bands(sec[k]) for k in keys)
        classes.append(
            ClassSpec(
                name=name[len("class:") :].strip(),
                kind=kind,
                median_duration=sec.getfloat("median_duration"),
                sigma=sec.getfloat("sigma", 0.5),
                rate=sec.getfloat("rate", 1.0),
                profiles=profiles,
                noise=sec.getfloat("noise", 0.1),
                gain_jitter=sec.getfloat("gain_jitter", 0.0),
            )
        )
    if not classes:
        return replace(default_spec(), **base)
    return SynthSpec(tuple(classes), **base)


def format_spec(spec: SynthSpec) -> str:
    lines = [
        "[corpus]",
        f"clip_length = {spec.clip_length:g}",
        f"n_clips = {spec.n_clips}",
        f"n_mels = {spec.n_mels}",
        f"background_level = {spec.background_level:g}",
        f"background_noise = {spec.background_noise:g}",
        f"seed = {spec.seed}",
    ]
    for c in spec.classes:
        lines += [
            "",
            f"[class:{c.name}]",
            f"kind = {c.kind}",
            f"median_duration = {c.median_duration:g}",
            f"sigma = {c.sigma:g}",
            f"rate = {c.rate:g}",
            f"noise = {c.noise:g}",
            f"gain_jitter = {c.gain_jitter:g}",
        ]
        if c.kind == STATIONARY:
            lines.append(f"profile = {_format_bands(c.profiles[0])}")
        else:
            lines += [f"{p} = {_format_bands(b)}" for p, b in zip(_PHASES, c.profiles)]
    return "\n".join(lines) + "\n"
