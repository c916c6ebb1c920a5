"""Pure numpy kernels.

Reference implementations for the hot elementwise/row-wise operations.
They accept float32 or float64 and preserve the input dtype; reductions
that feed gradients accumulate in float64 where it is cheap to do so.
The compiled backend in _ckernels.pyx mirrors these for float32.
"""

import numpy as np


def softmax_rows_fwd(x):
    m = np.max(x, axis=1, keepdims=True)
    y = np.exp(x - m)
    y /= np.sum(y, axis=1, keepdims=True)
    return y


def softmax_rows_bwd(y, gy):
    inner = np.sum(y * gy, axis=1, keepdims=True)
    return (y * (gy - inner)).astype(y.dtype, copy=False)


def rmsnorm_fwd(x, w, eps):
    ms = np.mean(np.square(x, dtype=np.float64), axis=1) + eps
    inv = (1.0 / np.sqrt(ms)).astype(x.dtype)
    y = x * inv[:, None] * w[None, :]
    return y, inv


def rmsnorm_bwd(x, w, inv, gy):
    c = x.shape[1]
    gyw = gy * w[None, :]
    dot = np.sum(gyw * x, axis=1, keepdims=True)
    gx = inv[:, None] * (gyw - x * (np.square(inv)[:, None] * dot / c))
    gw = np.sum(gy * x * inv[:, None], axis=0, dtype=np.float64)
    return gx.astype(x.dtype, copy=False), gw.astype(x.dtype, copy=False)


def silu_fwd(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return (x * s).astype(x.dtype, copy=False)


def silu_bwd(x, gy):
    s = 1.0 / (1.0 + np.exp(-x))
    return (gy * s * (1.0 + x * (1.0 - s))).astype(x.dtype, copy=False)


def cross_entropy_fwd(logits, targets):
    rows = logits.shape[0]
    m = np.max(logits, axis=1, keepdims=True)
    e = np.exp(logits - m)
    z = np.sum(e, axis=1, keepdims=True)
    probs = e / z
    lse = (m[:, 0] + np.log(z[:, 0])).astype(np.float64)
    picked = logits[np.arange(rows), targets].astype(np.float64)
    loss = float(np.mean(lse - picked))
    return loss, probs


def cross_entropy_bwd(probs, targets, gscalar):
    rows = probs.shape[0]
    g = probs * (gscalar / rows)
    g[np.arange(rows), targets] -= gscalar / rows
    return g.astype(probs.dtype, copy=False)


def abs_colsum(w):
    return np.sum(np.abs(w, dtype=np.float64), axis=0)


def sq_colsum(x):
    return np.sum(np.square(x, dtype=np.float64), axis=0)
