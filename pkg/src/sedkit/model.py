"""A small CRNN for frame-level multi-label tagging, with exact gradients.

Layout of one clip of ``N`` frames and ``F`` mel bands::

    (N, F, 1) -> [conv 3x3 same, ReLU, max-pool 1 x p over frequency] x 3
              -> (N, F / prod(p) * C) -> BiGRU (H per direction, concatenated)
              -> dense + ReLU -> dense to M linear logits

Every array op works on a leading batch axis, so equal-length clips can be
stacked. Gradients are hand-derived; ``backward`` returns the gradient of
``sum(d_logits * logits)`` for every parameter tensor.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

__all__ = [
    "ShapeError",
    "CrnnConfig",
    "CrnnParameters",
    "ForwardTrace",
    "init_params",
    "forward",
    "backward",
    "conv_stack",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"SEDM"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class CrnnConfig:
    n_mels: int = 64
    conv_channels: tuple[int, ...] = (128, 128, 128)
    kernel: int = 3
    pool_freq: tuple[int, ...] = (8, 4, 2)
    gru_units: int = 32
    dense_units: int = 32
    n_classes: int = 1

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "pool_freq", tuple(int(p) for p in self.pool_freq))
        if len(self.conv_channels) != len(self.pool_freq):
            raise ValueError("conv_channels and pool_freq must have the same length")
        counts = (self.n_mels, self.kernel, self.gru_units, self.dense_units, self.n_classes)
        if min(counts + self.conv_channels + self.pool_freq) < 1:
            raise ValueError("all layer sizes must be positive")
        if self.kernel % 2 != 1:
            raise ValueError("kernel size must be odd for same padding")
        if self.n_mels % int(np.prod(self.pool_freq)):
            raise ValueError(f"pooling {self.pool_freq} does not divide n_mels={self.n_mels}")

    @property
    def gru_input(self) -> int:
        return self.n_mels // int(np.prod(self.pool_freq)) * self.conv_channels[-1]

    def shapes(self) -> dict[str, tuple[int, ...]]:
        """Parameter tensor shapes in checkpoint order."""
        k, h = self.kernel, self.gru_units
        out: dict[str, tuple[int, ...]] = {}
        c_in = 1
        for i, c in enumerate(self.conv_channels):
            out[f"conv{i}.weight"] = (k, k, c_in, c)
            out[f"conv{i}.bias"] = (c,)
            c_in = c
        for d in ("fwd", "bwd"):
            out[f"gru_{d}.W"] = (self.gru_input, 3 * h)
            out[f"gru_{d}.U"] = (h, 3 * h)
            out[f"gru_{d}.b"] = (3 * h,)
        out["dense.weight"] = (2 * h, self.dense_units)
        out["dense.bias"] = (self.dense_units,)
        out["out.weight"] = (self.dense_units, self.n_classes)
        out["out.bias"] = (self.n_classes,)
        return out


@dataclass
class CrnnParameters:
    config: CrnnConfig
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        expected = self.config.shapes()
        if list(self.tensors) != list(expected):
            raise ShapeError("parameter names do not match the configuration")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {self.tensors[name].shape}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def copy(self) -> "CrnnParameters":
        return CrnnParameters(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def equal(self, other: "CrnnParameters") -> bool:
        return self.config == other.config and all(
            np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items()
        )


def _glorot_fans(name: str, shape: tuple[int, ...]) -> tuple[int, int]:
    if name.startswith("conv"):
        k1, k2, c_in, c_out = shape
        return k1 * k2 * c_in, k1 * k2 * c_out
    return shape[0], shape[1]


def init_params(cfg: CrnnConfig, seed: int) -> CrnnParameters:
    """Glorot-uniform weights, zero biases, GRU update-gate bias of one."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in cfg.shapes().items():
        if len(shape) == 1:
            t = np.zeros(shape)
            if name.startswith("gru_"):
                t[: cfg.gru_units] = 1.0
        else:
            fan_in, fan_out = _glorot_fans(name, shape)
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            t = rng.uniform(-bound, bound, size=shape)
        tensors[name] = t
    return CrnnParameters(cfg, tensors)


# ---------------------------------------------------------------------------
# layers


def _conv_forward(x, w, b):
    """Same-padded 2-D convolution over (time, freq); ``x`` is (B, N, F, C)."""
    k = w.shape[0]
    pad = k // 2
    bsz, n, f, c_in = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(bsz * n * f, k * k * c_in)
    out = cols @ w.reshape(k * k * c_in, -1)
    out += b
    return out.reshape(bsz, n, f, -1), cols


def _conv_backward(dout, cols, w, x_shape, need_input=True):
    k = w.shape[0]
    pad = k // 2
    bsz, n, f, c_in = x_shape
    c_out = w.shape[-1]
    d2 = dout.reshape(-1, c_out)
    dw = (cols.T @ d2).reshape(w.shape)
    db = _column_sum(d2)
    if not need_input:
        return None, dw, db
    dcols = (d2 @ w.reshape(k * k * c_in, c_out).T).reshape(bsz, n, f, k, k, c_in)
    dxp = np.zeros((bsz, n + 2 * pad, f + 2 * pad, c_in))
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + n, j : j + f, :] += dcols[:, :, :, i, j, :]
    return dxp[:, pad : pad + n, pad : pad + f, :], dw, db


def _column_sum(a):
    # a BLAS product is several times faster than ndarray.sum over axis 0 on tall matrices
    return np.ones(a.shape[0]) @ a


def _pool_forward(x, p):
    bsz, n, f, c = x.shape
    grouped = x.reshape(bsz, n, f // p, p, c)
    pooled = grouped.max(axis=3)
    # ties are measure-zero for real-valued inputs
    mask = grouped == pooled[:, :, :, None, :]
    return pooled, mask


def _pool_backward(dout, mask, x_shape):
    return (mask * dout[:, :, :, None, :]).reshape(x_shape)


def _gru_forward(seq, w, u, b):
    """Run stacked GRU directions over ``seq`` (D, B, T, In) with weights (D, In, 3H), (D, H, 3H), (D, 3H).

    Each direction ``d`` reads its own sequence ``seq[d]``; stacking the two
    directions of the BiGRU halves the number of Python-level time steps.
    """
    n_dir, bsz, t_len, _ = seq.shape
    h_units = u.shape[1]
    u_zr, u_n = u[:, :, : 2 * h_units], u[:, :, 2 * h_units :]
    xw = seq @ w[:, None] + b[:, None, None]
    hs = np.empty((n_dir, bsz, t_len, h_units))
    zs = np.empty_like(hs)
    rs = np.empty_like(hs)
    ns = np.empty_like(hs)
    h = np.zeros((n_dir, bsz, h_units))
    for t in range(t_len):
        zr = expit(xw[:, :, t, : 2 * h_units] + h @ u_zr)
        z, r = zr[..., :h_units], zr[..., h_units:]
        nt = np.tanh(xw[:, :, t, 2 * h_units :] + (r * h) @ u_n)
        h = z * h + (1.0 - z) * nt
        hs[:, :, t], zs[:, :, t], rs[:, :, t], ns[:, :, t] = h, z, r, nt
    return hs, (seq, zs, rs, ns)


def _gru_backward(dhs, hs, cache, w, u):
    seq, zs, rs, ns = cache
    n_dir, bsz, t_len, h_units = hs.shape
    u_zr_t = u[:, :, : 2 * h_units].transpose(0, 2, 1)
    u_n_t = u[:, :, 2 * h_units :].transpose(0, 2, 1)
    h_prev_all = np.concatenate([np.zeros((n_dir, bsz, 1, h_units)), hs[:, :, :-1]], axis=2)
    dxw = np.empty((n_dir, bsz, t_len, 3 * h_units))
    d_rh_all = np.empty_like(hs)
    dh_next = np.zeros((n_dir, bsz, h_units))
    for t in range(t_len - 1, -1, -1):
        h_prev = h_prev_all[:, :, t]
        z, r, nt = zs[:, :, t], rs[:, :, t], ns[:, :, t]
        dh = dhs[:, :, t] + dh_next
        dn_pre = dh * (1.0 - z) * (1.0 - nt * nt)
        d_rh = dn_pre @ u_n_t
        dzr = dxw[:, :, t, : 2 * h_units]
        dzr[..., :h_units] = dh * (h_prev - nt) * z * (1.0 - z)
        dzr[..., h_units:] = d_rh * h_prev * r * (1.0 - r)
        dxw[:, :, t, 2 * h_units :] = dn_pre
        d_rh_all[:, :, t] = d_rh
        dh_next = dh * z + d_rh * r + dzr @ u_zr_t
    flat = dxw.reshape(n_dir, -1, 3 * h_units)
    h_prev_flat = h_prev_all.reshape(n_dir, -1, h_units)
    rh_flat = (rs * h_prev_all).reshape(n_dir, -1, h_units)
    du = np.concatenate(
        [h_prev_flat.transpose(0, 2, 1) @ flat[..., : 2 * h_units], rh_flat.transpose(0, 2, 1) @ flat[..., 2 * h_units :]],
        axis=2,
    )
    dw = seq.reshape(n_dir, -1, seq.shape[-1]).transpose(0, 2, 1) @ flat
    db = flat.sum(axis=1)
    dseq = dxw @ w.transpose(0, 2, 1)[:, None]
    return dseq, dw, du, db


def _gru_stack(params: CrnnParameters):
    return tuple(np.stack([params[f"gru_fwd.{k}"], params[f"gru_bwd.{k}"]]) for k in ("W", "U", "b"))


def _relu(x):
    return np.maximum(x, 0.0)


# ---------------------------------------------------------------------------
# network


@dataclass
class ForwardTrace:
    params: CrnnParameters
    logits: np.ndarray
    batched: bool
    cache: dict = field(repr=False)


def _as_batch(x, cfg: CrnnConfig):
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 3
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[-1] != cfg.n_mels:
        raise ShapeError(f"expected input (N, {cfg.n_mels}) or (B, N, {cfg.n_mels}), got {x.shape}")
    if x.shape[1] < 1:
        raise ShapeError("input must contain at least one frame")
    return x, batched


def _conv_stack(params: CrnnParameters, x):
    cfg = params.config
    h = x[..., None]
    layers = []
    for i, p in enumerate(cfg.pool_freq):
        pre, cols = _conv_forward(h, params[f"conv{i}.weight"], params[f"conv{i}.bias"])
        # max-pooling commutes with ReLU, so rectify the smaller pooled map
        pooled, mask = _pool_forward(pre, p)
        layers.append((h.shape, cols, pre.shape, mask, pooled))
        h = _relu(pooled)
    bsz, n = h.shape[:2]
    return h.reshape(bsz, n, -1), layers, h.shape


def conv_stack(params: CrnnParameters, x) -> np.ndarray:
    """Sequence fed to the recurrent layer, shape (N, gru_input) or batched."""
    x, batched = _as_batch(x, params.config)
    seq = _conv_stack(params, x)[0]
    return seq if batched else seq[0]


def forward(params: CrnnParameters, x) -> ForwardTrace:
    """Logits for features ``x`` of shape (N, n_mels) or (B, N, n_mels)."""
    x, batched = _as_batch(x, params.config)
    seq, conv_layers, pooled_shape = _conv_stack(params, x)
    w, u, b = _gru_stack(params)
    hs, cache_gru = _gru_forward(np.stack([seq, seq[:, ::-1]]), w, u, b)
    rnn = np.concatenate([hs[0], hs[1][:, ::-1]], axis=-1)
    dense_pre = rnn @ params["dense.weight"] + params["dense.bias"]
    dense = _relu(dense_pre)
    logits = dense @ params["out.weight"] + params["out.bias"]
    cache = dict(
        conv=conv_layers,
        pooled_shape=pooled_shape,
        gru=(hs, cache_gru),
        rnn=rnn,
        dense_pre=dense_pre,
        dense=dense,
    )
    return ForwardTrace(params, logits if batched else logits[0], batched, cache)


def backward(trace: ForwardTrace, d_logits, params: CrnnParameters | None = None) -> dict[str, np.ndarray]:
    """Gradients of ``sum(d_logits * trace.logits)`` for every parameter tensor."""
    if params is not None and params is not trace.params:
        raise ValueError("trace was produced with different parameters")
    p = trace.params
    cfg = p.config
    d_logits = np.asarray(d_logits, dtype=np.float64)
    if d_logits.shape != trace.logits.shape:
        raise ShapeError(f"d_logits shape {d_logits.shape} does not match logits {trace.logits.shape}")
    dy = d_logits if trace.batched else d_logits[None]
    c = trace.cache
    g: dict[str, np.ndarray] = {}

    m = dy.shape[-1]
    g["out.weight"] = c["dense"].reshape(-1, cfg.dense_units).T @ dy.reshape(-1, m)
    g["out.bias"] = dy.sum(axis=(0, 1))
    d_dense = (dy @ p["out.weight"].T) * (c["dense_pre"] > 0)
    g["dense.weight"] = c["rnn"].reshape(-1, 2 * cfg.gru_units).T @ d_dense.reshape(-1, cfg.dense_units)
    g["dense.bias"] = d_dense.sum(axis=(0, 1))
    d_rnn = d_dense @ p["dense.weight"].T

    h = cfg.gru_units
    hs, cache_gru = c["gru"]
    w, u, _ = _gru_stack(p)
    dseq, dw, du, db = _gru_backward(np.stack([d_rnn[..., :h], d_rnn[:, ::-1, h:]]), hs, cache_gru, w, u)
    for i, d in enumerate(("fwd", "bwd")):
        g[f"gru_{d}.W"], g[f"gru_{d}.U"], g[f"gru_{d}.b"] = dw[i], du[i], db[i]
    dh = (dseq[0] + dseq[1][:, ::-1]).reshape(c["pooled_shape"])

    for i in range(len(cfg.pool_freq) - 1, -1, -1):
        in_shape, cols, pre_shape, mask, pooled = c["conv"][i]
        d_pre = _pool_backward(dh * (pooled > 0), mask, pre_shape)
        dh, g[f"conv{i}.weight"], g[f"conv{i}.bias"] = _conv_backward(
            d_pre, cols, p[f"conv{i}.weight"], in_shape, need_input=i > 0
        )
    return {name: g[name] for name in cfg.shapes()}


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout (little-endian): b"SEDM", u32 version, then the config as u32 fields
#   n_mels, kernel, n_conv, conv_channels[n_conv], n_pool, pool_freq[n_pool],
#   gru_units, dense_units, n_classes,
# then u32 n_labels and each label as (u32 byte length, UTF-8 bytes),
# then u32 n_tensors and each tensor as (u32 rank, u32 dims[rank], f64 values)
# in CrnnConfig.shapes() order, followed by any extra tensors in caller order.


def _pack_u32(*values: int) -> bytes:
    return struct.pack(f"<{len(values)}I", *values)


def save_checkpoint(path, params: CrnnParameters, labels=(), extras=()) -> None:
    cfg = params.config
    parts = [
        CHECKPOINT_MAGIC,
        _pack_u32(CHECKPOINT_VERSION, cfg.n_mels, cfg.kernel, len(cfg.conv_channels)),
        _pack_u32(*cfg.conv_channels),
        _pack_u32(len(cfg.pool_freq), *cfg.pool_freq),
        _pack_u32(cfg.gru_units, cfg.dense_units, cfg.n_classes),
        _pack_u32(len(labels)),
    ]
    for label in labels:
        raw = label.encode("utf-8")
        parts += [_pack_u32(len(raw)), raw]
    tensors = list(params.tensors.values()) + [np.asarray(e, dtype=np.float64) for e in extras]
    parts.append(_pack_u32(len(tensors)))
    for t in tensors:
        parts += [_pack_u32(t.ndim, *t.shape), np.ascontiguousarray(t, dtype="<f8").tobytes()]
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def u32(self, count=1):
        vals = struct.unpack_from(f"<{count}I", self.raw, self.pos)
        self.pos += 4 * count
        return vals

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise ValueError("truncated checkpoint")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out


def load_checkpoint(path):
    """Return ``(params, labels, extras)`` from a checkpoint file."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    try:
        version, n_mels, kernel, n_conv = r.u32(4)
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        channels = r.u32(n_conv)
        (n_pool,) = r.u32()
        pools = r.u32(n_pool)
        gru, dense, n_classes = r.u32(3)
        cfg = CrnnConfig(n_mels, channels, kernel, pools, gru, dense, n_classes)
        (n_labels,) = r.u32()
        labels = tuple(r.take(r.u32()[0]).decode("utf-8") for _ in range(n_labels))
        (n_tensors,) = r.u32()
        tensors = []
        for _ in range(n_tensors):
            (rank,) = r.u32()
            dims = r.u32(rank)
            count = int(np.prod(dims)) if rank else 1
            tensors.append(np.frombuffer(r.take(8 * count), dtype="<f8").reshape(dims).astype(np.float64))
    except struct.error:
        raise ValueError(f"{path}: truncated checkpoint") from None
    names = list(cfg.shapes())
    if len(tensors) < len(names):
        raise ValueError(f"{path}: checkpoint holds {len(tensors)} tensors, config needs {len(names)}")
    params = CrnnParameters(cfg, dict(zip(names, tensors)))
    return params, labels, tensors[len(names) :]
