"""Independent reference implementations shared by the test modules."""

import math

import numpy as np

from sedkit.model import backward, forward


def naive_terms(y, z, gamma=0.0):
    """Direct transcription of the weighted cross-entropy, for well-scaled logits only."""
    s = 1.0 / (1.0 + np.exp(-y))
    return -((1 - s) ** gamma * z * np.log(s) + s**gamma * (1 - z) * np.log(1 - s))


def central_diff(fn, y, h=1e-6):
    g = np.zeros_like(y)
    for i in np.ndindex(y.shape):
        yp, ym = y.copy(), y.copy()
        yp[i] += h
        ym[i] -= h
        g[i] = (fn(yp) - fn(ym)) / (2 * h)
    return g


def brute_force(ref_seg, pred_seg):
    """Enumerate every (segment, class) cell one at a time."""
    k, m = ref_seg.shape
    tp, fp, fn, ref = [0] * m, [0] * m, [0] * m, [0] * m
    s_tot = d_tot = i_tot = r_tot = 0
    for seg in range(k):
        fn_k = fp_k = 0
        for c in range(m):
            r, p = bool(ref_seg[seg, c]), bool(pred_seg[seg, c])
            if r:
                ref[c] += 1
                r_tot += 1
            if r and p:
                tp[c] += 1
            elif p:
                fp[c] += 1
                fp_k += 1
            elif r:
                fn[c] += 1
                fn_k += 1
        s = min(fn_k, fp_k)
        s_tot += s
        d_tot += fn_k - s
        i_tot += fp_k - s
    f = [2 * tp[c] / (2 * tp[c] + fp[c] + fn[c]) if (2 * tp[c] + fp[c] + fn[c]) else 0.0 for c in range(m)]
    er = []
    for c in range(m):
        if ref[c]:
            er.append((fn[c] + fp[c]) / ref[c])
        else:
            er.append(0.0 if fp[c] == 0 else math.inf)
    denom = 2 * sum(tp) + sum(fp) + sum(fn)
    return dict(
        tp=tp, fp=fp, fn=fn, S=s_tot, D=d_tot, I=i_tot, f=f, er=er,
        macro=sum(f) / m if m else 0.0,
        micro=2 * sum(tp) / denom if denom else 0.0,
        overall=(s_tot + d_tot + i_tot) / r_tot if r_tot else (0.0 if s_tot + d_tot + i_tot == 0 else math.inf),
    )


def crnn_gradient_errors(params, x, h=1e-5, seed=0):
    """Relative error of every analytic parameter gradient against central differences.

    The scalar probed is ``sum(r * logits)`` for a fixed random ``r``; returns
    ``{name: (tensor_error, worst_entry_error)}``.
    """
    r = np.random.default_rng(seed).normal(size=forward(params, x).logits.shape)
    grads = backward(forward(params, x), r)
    errors = {}
    for name, t in params.tensors.items():
        fd = np.zeros_like(t)
        for i in np.ndindex(t.shape):
            old = t[i]
            t[i] = old + h
            up = float((forward(params, x).logits * r).sum())
            t[i] = old - h
            down = float((forward(params, x).logits * r).sum())
            t[i] = old
            fd[i] = (up - down) / (2 * h)
        g = grads[name]
        scale = np.abs(fd).max() + 1e-12
        errors[name] = (np.linalg.norm(g - fd) / (np.linalg.norm(fd) + 1e-12), np.abs(g - fd).max() / scale)
    return errors
