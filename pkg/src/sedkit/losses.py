"""Frame-wise multi-label losses computed from logits.

All three losses are sums over frames and classes and come with their exact
gradient with respect to the logits. Log-probabilities are taken as
``log s(y) = -softplus(-y)`` and ``log(1 - s(y)) = -softplus(y)`` so that no
logarithm is ever applied to a saturated sigmoid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .eventroll import EventRoll

__all__ = [
    "LossResult",
    "InverseFreqConfig",
    "sigmoid",
    "softplus",
    "bce_loss",
    "inverse_freq_weights",
    "inverse_freq_loss",
    "duration_robust_loss",
    "compute_loss",
]


@dataclass(frozen=True)
class LossResult:
    value: float
    d_logits: np.ndarray


@dataclass(frozen=True)
class InverseFreqConfig:
    c: float = 500.0
    counts: np.ndarray | None = None  # per-class active frames; taken from the roll when None

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError(f"C must be positive, got {self.c}")
        if self.counts is not None and np.any(np.asarray(self.counts) < 0):
            raise ValueError("frame counts must be non-negative")


def sigmoid(x):
    """Logistic function without overflow for large negative inputs."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def softplus(x):
    return np.logaddexp(0.0, x)


def _labels(logits, roll) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(logits, dtype=np.float64)
    z = roll.activity if isinstance(roll, EventRoll) else np.asarray(roll)
    if y.shape != z.shape:
        raise ValueError(f"logits shape {y.shape} does not match roll shape {z.shape}")
    return y, z.astype(np.float64)


def _bce_terms(y, z):
    # elementwise loss and gradient; the gradient equals s(y) - z
    loss = z * softplus(-y) + (1.0 - z) * softplus(y)
    grad = (1.0 - z) * sigmoid(y) - z * sigmoid(-y)
    return loss, grad


def bce_loss(logits, roll) -> LossResult:
    y, z = _labels(logits, roll)
    loss, grad = _bce_terms(y, z)
    return LossResult(float(loss.sum()), grad)


def inverse_freq_weights(roll, c: float = 500.0) -> np.ndarray:
    """Per-class weights ``C / (N_m + C)`` from the roll's active-frame counts."""
    if not c > 0:
        raise ValueError(f"C must be positive, got {c}")
    act = roll.activity if isinstance(roll, EventRoll) else np.asarray(roll)
    counts = act.sum(axis=0, dtype=np.float64)
    return c / (counts + c)


def inverse_freq_loss(logits, roll, cfg: InverseFreqConfig = InverseFreqConfig()) -> LossResult:
    y, z = _labels(logits, roll)
    if cfg.counts is None:
        w = inverse_freq_weights(z, cfg.c)
    else:
        w = cfg.c / (np.asarray(cfg.counts, dtype=np.float64) + cfg.c)
    loss, grad = _bce_terms(y, z)
    return LossResult(float((loss.sum(axis=0) * w).sum()), grad * w)


def duration_robust_loss(logits, roll, gamma: float) -> LossResult:
    """BCE with each term scaled by the probability mass it still misses.

    Active entries are weighted by ``(1 - s)**gamma`` and inactive ones by
    ``s**gamma``; ``gamma = 0`` gives back plain BCE.
    """
    if gamma < 0:
        raise ValueError(f"gamma must be non-negative, got {gamma}")
    y, z = _labels(logits, roll)
    sp_neg = softplus(-y)  # -log s
    sp_pos = softplus(y)  # -log(1 - s)
    s = sigmoid(y)
    a = sigmoid(-y)  # 1 - s
    w_pos = np.exp(-gamma * sp_pos)  # (1 - s)**gamma
    w_neg = np.exp(-gamma * sp_neg)  # s**gamma
    loss = z * w_pos * sp_neg + (1.0 - z) * w_neg * sp_pos
    # d/dy of (1-s)^g * -log s  = -(1-s)^g * (g * s * -log s + (1 - s))
    # d/dy of s^g * -log(1-s)   =  s^g * (g * (1 - s) * -log(1-s) + s)
    grad = -z * w_pos * (gamma * s * sp_neg + a) + (1.0 - z) * w_neg * (gamma * a * sp_pos + s)
    return LossResult(float(loss.sum()), grad)


def compute_loss(kind: str, logits, roll, gamma: float = 0.0, c: float = 500.0) -> LossResult:
    if kind == "bce":
        return bce_loss(logits, roll)
    if kind == "inverse_freq":
        return inverse_freq_loss(logits, roll, InverseFreqConfig(c))
    if kind == "duration_robust":
        return duration_robust_loss(logits, roll, gamma)
    raise ValueError(f"unknown loss kind {kind!r}")
