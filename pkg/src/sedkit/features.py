"""Log mel-band energy features.

Frames are Hamming-windowed, zero-padded to a power-of-two FFT, converted to
power spectra, pooled by triangular mel filters and log-compressed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile

__all__ = [
    "FeatureError",
    "AudioBuffer",
    "MelParams",
    "NormStats",
    "hz_to_mel",
    "mel_to_hz",
    "mel_filterbank",
    "filter_centers",
    "frame_count",
    "log_mel",
    "fit_norm",
    "apply_norm",
    "read_wav",
    "write_features",
    "read_features",
]

FEATURE_MAGIC = b"SEDF"
FEATURE_VERSION = 1


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class AudioBuffer:
    sample_rate: int
    samples: np.ndarray

    def __post_init__(self):
        if int(self.sample_rate) <= 0:
            raise FeatureError(f"sample rate must be positive, got {self.sample_rate}")
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise FeatureError("audio must be mono (1-D)")
        if not np.isfinite(samples).all():
            raise FeatureError("audio contains non-finite samples")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))


@dataclass(frozen=True)
class MelParams:
    n_mels: int = 64
    window: float = 0.040
    hop: float = 0.020
    fft_size: int | None = None  # smallest power of two >= window samples when None
    f_min: float = 0.0
    f_max: float | None = None  # Nyquist when None
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.n_mels < 1:
            raise FeatureError("n_mels must be >= 1")
        if not 0 < self.hop <= self.window:
            raise FeatureError("need 0 < hop <= window")
        if self.log_floor <= 0:
            raise FeatureError("log_floor must be positive")

    def win_samples(self, sr: int) -> int:
        return int(round(self.window * sr))

    def hop_samples(self, sr: int) -> int:
        return int(round(self.hop * sr))

    def n_fft(self, sr: int) -> int:
        win = self.win_samples(sr)
        if self.fft_size is None:
            return 1 << max(win - 1, 0).bit_length()
        if self.fft_size & (self.fft_size - 1) or self.fft_size < win:
            raise FeatureError(f"fft_size {self.fft_size} must be a power of two >= {win}")
        return self.fft_size

    def band_edges(self, sr: int) -> tuple[float, float]:
        f_max = sr / 2 if self.f_max is None else self.f_max
        if not 0 <= self.f_min < f_max <= sr / 2:
            raise FeatureError(f"need 0 <= f_min < f_max <= {sr / 2}, got {self.f_min}, {f_max}")
        return self.f_min, f_max


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def _mel_points(p: MelParams, sample_rate: int) -> np.ndarray:
    f_min, f_max = p.band_edges(sample_rate)
    return mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), p.n_mels + 2))


def filter_centers(p: MelParams, sample_rate: int) -> np.ndarray:
    """Center frequency (Hz) of every mel filter."""
    return _mel_points(p, sample_rate)[1:-1]


def mel_filterbank(p: MelParams, sample_rate: int) -> np.ndarray:
    """Triangular mel filters with unit peak, shape ``(n_mels, n_fft // 2 + 1)``."""
    n_fft = p.n_fft(sample_rate)
    bin_hz = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    pts = _mel_points(p, sample_rate)
    lo, mid, hi = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    rising = (bin_hz - lo) / (mid - lo)
    falling = (hi - bin_hz) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(fb.sum(axis=1) <= 0)
    if empty.size:
        raise FeatureError(
            f"{empty.size} of {p.n_mels} mel filters contain no FFT bin "
            f"(n_fft={n_fft}, sr={sample_rate}); reduce n_mels or raise fft_size"
        )
    return fb


def frame_count(n_samples: int, win: int, hop: int) -> int:
    if n_samples < win:
        return 0
    return (n_samples - win) // hop + 1


def log_mel(audio: AudioBuffer, p: MelParams = MelParams(), expected_rate: int | None = None) -> np.ndarray:
    """Log mel-band energies, shape ``(n_frames, n_mels)``.

    ``expected_rate`` guards against feeding audio recorded at a different
    rate than the one the rest of a pipeline assumes.
    """
    sr = audio.sample_rate
    if expected_rate is not None and sr != expected_rate:
        raise FeatureError(f"sample rate {sr} Hz does not match expected {expected_rate} Hz")
    win, hop = p.win_samples(sr), p.hop_samples(sr)
    if win < 1 or hop < 1:
        raise FeatureError(f"window/hop shorter than one sample at {sr} Hz")
    n_fft = p.n_fft(sr)
    fb = mel_filterbank(p, sr)
    n = frame_count(audio.samples.size, win, hop)
    if n == 0:
        return np.zeros((0, p.n_mels))
    frames = np.lib.stride_tricks.sliding_window_view(audio.samples, win)[::hop][:n]
    spec = np.fft.rfft(frames * np.hamming(win), n=n_fft, axis=1)
    power = spec.real**2 + spec.imag**2
    return np.log(np.maximum(power @ fb.T, p.log_floor))


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray


def fit_norm(features: list[np.ndarray], std_floor: float = 1e-8) -> NormStats:
    """Per-dimension mean and standard deviation pooled over all frames."""
    frames = [np.asarray(f, dtype=np.float64) for f in features if len(f)]
    if not frames:
        raise FeatureError("cannot fit normalization on zero frames")
    stacked = np.concatenate(frames, axis=0)
    return NormStats(stacked.mean(axis=0), np.maximum(stacked.std(axis=0), std_floor))


def apply_norm(f: np.ndarray, s: NormStats) -> np.ndarray:
    return (np.asarray(f, dtype=np.float64) - s.mean) / s.std


def read_wav(path) -> AudioBuffer:
    """Read a PCM-16 or float-32 WAV file; multichannel input is averaged to mono."""
    sr, data = wavfile.read(path)
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32 or data.dtype == np.float64:
        x = data.astype(np.float64)
    else:
        raise FeatureError(f"{path}: unsupported WAV sample type {data.dtype}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    return AudioBuffer(sr, x)


def write_features(path, values: np.ndarray) -> None:
    values = np.ascontiguousarray(values, dtype="<f8")
    if values.ndim != 2:
        raise FeatureError("feature matrix must be 2-D")
    n, d = values.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<III", FEATURE_VERSION, n, d))
        fh.write(values.tobytes())


def read_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != FEATURE_MAGIC:
        raise FeatureError(f"{path}: not a feature file")
    version, n, d = struct.unpack_from("<III", raw, 4)
    if version != FEATURE_VERSION:
        raise FeatureError(f"{path}: unsupported feature file version {version}")
    if len(raw) != 16 + 8 * n * d:
        raise FeatureError(f"{path}: truncated feature file")
    return np.frombuffer(raw, dtype="<f8", offset=16).reshape(n, d).astype(np.float64)
