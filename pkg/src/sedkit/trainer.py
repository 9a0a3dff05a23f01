"""Training loop, model evaluation and the focusing-weight sweep."""

from __future__ import annotations

import configparser
import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from threadpoolctl import threadpool_limits

from .eventroll import FrameParams
from .losses import compute_loss, sigmoid
from .metrics import EvalReport, SegmentParams, evaluate_corpus, threshold
from .model import CrnnConfig, CrnnParameters, backward, forward, init_params

__all__ = [
    "TrainingError",
    "TrainConfig",
    "TrainHistory",
    "Adam",
    "train",
    "predict",
    "evaluate_model",
    "gamma_sweep",
    "DEFAULT_GAMMAS",
    "parse_config",
    "format_config",
]

log = logging.getLogger(__name__)

LOSS_KINDS = ("bce", "inverse_freq", "duration_robust")
DEFAULT_GAMMAS = (0.25, 0.5, 1.0, 2.0, 4.0)
# clips per forward/backward unit; fixed so the arithmetic never depends on the worker count
GRADIENT_CHUNK = 4


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    loss_kind: str = "bce"
    gamma: float = 0.0
    c: float = 500.0
    epochs: int = 20
    clips_per_batch: int = 8
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    threshold: float = 0.5
    segment_length: float = 1.0
    conv_channels: tuple[int, ...] = (128, 128, 128)
    pool_freq: tuple[int, ...] = (8, 4, 2)
    gru_units: int = 32
    dense_units: int = 32

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "pool_freq", tuple(int(p) for p in self.pool_freq))
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.epochs < 1 or self.clips_per_batch < 1:
            raise ValueError("epochs and clips_per_batch must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if not self.c > 0:
            raise ValueError("C must be positive")
        if not 0 < self.threshold <= 1:
            raise ValueError("threshold must lie in (0, 1]")

    def model_config(self, n_mels: int, n_classes: int) -> CrnnConfig:
        return CrnnConfig(
            n_mels=n_mels,
            conv_channels=self.conv_channels,
            pool_freq=self.pool_freq,
            gru_units=self.gru_units,
            dense_units=self.dense_units,
            n_classes=n_classes,
        )

    def digest(self) -> str:
        return hashlib.sha256(format_config(self).encode()).hexdigest()[:12]


@dataclass
class TrainHistory:
    loss: list[float] = field(default_factory=list)
    macro_f: list[float] = field(default_factory=list)
    micro_f: list[float] = field(default_factory=list)
    batch_loss: list[float] = field(default_factory=list)

    def to_tsv(self) -> str:
        lines = ["epoch\tloss\tmacro_F\tmicro_F"]
        for i, loss in enumerate(self.loss):
            mac = f"{self.macro_f[i]:.6f}" if i < len(self.macro_f) else ""
            mic = f"{self.micro_f[i]:.6f}" if i < len(self.micro_f) else ""
            lines.append(f"{i + 1}\t{loss:.10g}\t{mac}\t{mic}")
        return "\n".join(lines) + "\n"


class Adam:
    def __init__(self, params: CrnnParameters, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = params.zeros_like()
        self.v = params.zeros_like()
        self.t = 0

    def step(self, params: CrnnParameters, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params.tensors[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _check_dataset(dataset) -> tuple[int, int]:
    if not dataset:
        raise TrainingError("dataset is empty")
    n_mels = dataset[0][0].shape[1]
    n_classes = dataset[0][1].n_classes
    for i, (x, roll) in enumerate(dataset):
        if x.ndim != 2 or x.shape[1] != n_mels:
            raise TrainingError(f"clip {i}: feature shape {x.shape} inconsistent with {n_mels} dims")
        if roll.n_classes != n_classes:
            raise TrainingError(f"clip {i}: {roll.n_classes} classes, expected {n_classes}")
        if roll.n_frames != x.shape[0]:
            raise TrainingError(f"clip {i}: {x.shape[0]} feature frames but {roll.n_frames} label frames")
    return n_mels, n_classes


def _chunks(clips) -> list[list[int]]:
    groups: dict[int, list[int]] = {}
    for i, (x, _) in enumerate(clips):
        groups.setdefault(x.shape[0], []).append(i)
    return [
        groups[n][s : s + GRADIENT_CHUNK] for n in sorted(groups) for s in range(0, len(groups[n]), GRADIENT_CHUNK)
    ]


def _chunk_gradient(params: CrnnParameters, clips, idx: list[int], cfg: TrainConfig):
    trace = forward(params, np.stack([clips[i][0] for i in idx]))
    d_logits = np.empty_like(trace.logits)
    values = []
    for j, i in enumerate(idx):
        res = compute_loss(cfg.loss_kind, trace.logits[j], clips[i][1], gamma=cfg.gamma, c=cfg.c)
        values.append(res.value)
        d_logits[j] = res.d_logits
    return values, backward(trace, d_logits)


def batch_gradient(params: CrnnParameters, clips, cfg: TrainConfig, pool: ThreadPoolExecutor | None = None):
    """Summed loss and gradient over ``clips``.

    Equal-length clips are stacked into chunks of ``GRADIENT_CHUNK``; chunks may
    run on ``pool`` but are always reduced in the same order.
    """
    chunks = _chunks(clips)
    run = pool.map if pool is not None else map
    total = 0.0
    grads = None
    for values, g in run(lambda idx: _chunk_gradient(params, clips, idx, cfg), chunks):
        for v in values:
            total += v
        if grads is None:
            grads = g
        else:
            for k in grads:
                grads[k] += g[k]
    return total, grads


def train(dataset, cfg: TrainConfig, eval_set=None, fp: FrameParams = FrameParams(), init=None, workers: int = 1):
    """Fit a CRNN on ``(features, roll)`` pairs; returns ``(params, history)``.

    Each step uses the summed per-clip gradient divided by the batch's total
    frame count. Clip order is reshuffled every epoch from the seeded
    generator, so a run is fully determined by ``(cfg, dataset)``. ``workers``
    threads share the gradient chunks of a batch; BLAS is held to one thread
    so results are bit-identical for any worker count.
    """
    if workers < 1:
        raise ValueError("workers must be positive")
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    with threadpool_limits(1), pool or nullcontext():
        return _train(dataset, cfg, eval_set, fp, init, pool)


def _train(dataset, cfg, eval_set, fp, init, pool):
    n_mels, n_classes = _check_dataset(dataset)
    params = init.copy() if init is not None else init_params(cfg.model_config(n_mels, n_classes), cfg.seed)
    opt = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    history = TrainHistory()
    sp = SegmentParams(cfg.segment_length)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        epoch_loss = 0.0
        for b in range(0, len(order), cfg.clips_per_batch):
            clips = [dataset[i] for i in order[b : b + cfg.clips_per_batch]]
            loss, grads = batch_gradient(params, clips, cfg, pool)
            if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
                raise TrainingError(f"non-finite loss or gradient at epoch {epoch + 1}, batch {b // cfg.clips_per_batch}")
            frames = sum(x.shape[0] for x, _ in clips)
            for g in grads.values():
                g /= frames
            opt.step(params, grads)
            history.batch_loss.append(loss)
            epoch_loss += loss
        history.loss.append(epoch_loss)
        if eval_set is not None:
            rep = evaluate_model(params, eval_set, fp, sp, cfg.threshold)
            history.macro_f.append(rep.macro_f)
            history.micro_f.append(rep.micro_f)
        log.info("epoch %d loss %.6g", epoch + 1, epoch_loss)
    return params, history


def predict(params: CrnnParameters, features, batch_size: int = 16) -> list[np.ndarray]:
    """Per-clip frame probabilities, same order as ``features``."""
    out: list[np.ndarray | None] = [None] * len(features)
    groups: dict[int, list[int]] = {}
    for i, x in enumerate(features):
        groups.setdefault(x.shape[0], []).append(i)
    for length in sorted(groups):
        idx = groups[length]
        for s in range(0, len(idx), batch_size):
            chunk = idx[s : s + batch_size]
            logits = forward(params, np.stack([features[i] for i in chunk])).logits
            for j, i in enumerate(chunk):
                out[i] = sigmoid(logits[j])
    return out


def evaluate_model(
    params: CrnnParameters,
    dataset,
    fp: FrameParams = FrameParams(),
    sp: SegmentParams = SegmentParams(),
    phi: float = 0.5,
    classes=None,
) -> EvalReport:
    """Forward, sigmoid, threshold at ``phi``, then pooled segment metrics."""
    probs = predict(params, [x for x, _ in dataset])
    pairs = [(roll, threshold(p, phi)) for (_, roll), p in zip(dataset, probs)]
    if classes is None:
        classes = tuple(str(i) for i in range(params.config.n_classes))
    return evaluate_corpus(pairs, fp, sp, classes)


def gamma_sweep(
    train_set, eval_set, gammas=DEFAULT_GAMMAS, base_cfg: TrainConfig = TrainConfig(), fp=FrameParams(), workers: int = 1
):
    """Train one duration-robust model per gamma; rows of ``(gamma, macro_F, micro_F)``.

    Run ``i`` starts from seed ``base_cfg.seed + i``.
    """
    gammas = list(gammas)
    if not gammas:
        raise ValueError("gamma list is empty")
    rows = []
    sp = SegmentParams(base_cfg.segment_length)
    for i, g in enumerate(gammas):
        cfg = replace(base_cfg, loss_kind="duration_robust", gamma=float(g), seed=base_cfg.seed + i)
        params, _ = train(train_set, cfg, fp=fp, workers=workers)
        rep = evaluate_model(params, eval_set, fp, sp, cfg.threshold)
        rows.append((float(g), rep.macro_f, rep.micro_f))
    return rows


# ---------------------------------------------------------------------------
# config files: flat ``key = value`` lines, ``#`` comments, list values comma-separated


def _coerce(name: str, text: str):
    kinds = {f.name: f.type for f in fields(TrainConfig)}
    if name not in kinds:
        raise ValueError(f"unknown config key {name!r}")
    kind = kinds[name]
    if "tuple" in str(kind):
        return tuple(int(v) for v in text.split(",") if v.strip())
    if kind in (int, "int"):
        return int(text)
    if kind in (float, "float"):
        return float(text)
    return text.strip()


def parse_config(text: str) -> TrainConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), comment_prefixes=("#",))
    cp.read_string("[train]\n" + text)
    return TrainConfig(**{k: _coerce(k, v) for k, v in cp["train"].items()})


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for k, v in asdict(cfg).items():
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
