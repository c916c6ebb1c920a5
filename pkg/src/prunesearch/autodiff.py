"""Reverse-mode automatic differentiation on numpy arrays.

A ComputationTape records operations in execution order; backward() replays
them in reverse, accumulating gradients into Tensor.grad. Gradients flow
only into tensors that require them or that lead to one, so frozen weights
cost nothing. All ops preserve the input dtype: float32 for production,
float64 for finite-difference checks.

Shape conventions: activations are [batch, time, features] (or [time,
features]); weights are [d_out, d_in] and applied as x @ W.T; per-head
layouts are [batch, heads, time, head_dim].
"""

import numpy as np

from . import kernels
from .errors import DimensionError, StateError


class Tensor:
    """An ndarray with an optional accumulated gradient."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


class ComputationTape:
    """Execution-ordered op log for one forward pass."""

    def __init__(self):
        self._nodes = []
        self._produced = set()

    def __len__(self):
        return len(self._nodes)

    def _tracked(self, t):
        return t.requires_grad or id(t) in self._produced

    def record(self, out, inputs, backward_fn):
        # needs[i] is fixed at record time: gradient w.r.t. input i is
        # computed only if something upstream can absorb it.
        needs = tuple(self._tracked(t) for t in inputs)
        if any(needs):
            self._nodes.append((out, inputs, needs, backward_fn))
            self._produced.add(id(out))
        return out


def backward(tape, loss):
    """Accumulate d loss / d tensor into .grad for every reachable tensor.

    loss must be a scalar produced on this tape. Existing .grad contents
    are added to, so call zero_grads between independent passes.
    """
    if loss.data.size != 1:
        raise StateError("backward requires a scalar loss")
    if id(loss) not in tape._produced:
        raise StateError("loss was not produced on this tape")
    grads = {id(loss): np.asarray(1.0, dtype=loss.data.dtype)}
    for out, inputs, needs, backward_fn in reversed(tape._nodes):
        gout = grads.pop(id(out), None)
        if gout is None:
            continue
        gins = backward_fn(gout, needs)
        for t, need, g in zip(inputs, needs, gins):
            if not need or g is None:
                continue
            if id(t) in tape._produced:
                key = id(t)
                # out-of-place: backward fns may return aliased arrays
                grads[key] = grads[key] + g if key in grads else g
            elif t.grad is None:
                t.grad = np.array(g, dtype=t.data.dtype)
            else:
                t.grad += g


def _rows(a):
    return a.reshape(-1, a.shape[-1])


def matmul(tape, a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul expects [m,k] @ [k,n], got {a.data.shape} and {b.data.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g, needs):
        ga = g @ b.data.T if needs[0] else None
        gb = a.data.T @ g if needs[1] else None
        return ga, gb

    return tape.record(out, (a, b), bwd)


def linear(tape, x, w):
    if x.data.shape[-1] != w.data.shape[1]:
        raise DimensionError(f"linear: input features {x.data.shape[-1]} != weight d_in {w.data.shape[1]}")
    out = Tensor(x.data @ w.data.T)

    def bwd(g, needs):
        gx = g @ w.data if needs[0] else None
        gw = _rows(g).T @ _rows(x.data) if needs[1] else None
        return gx, gw

    return tape.record(out, (x, w), bwd)


def add(tape, a, b):
    if a.data.shape != b.data.shape:
        raise DimensionError(f"add: shape mismatch {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data + b.data)

    def bwd(g, needs):
        return g, g

    return tape.record(out, (a, b), bwd)


def sub(tape, a, b):
    if a.data.shape != b.data.shape:
        raise DimensionError(f"sub: shape mismatch {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data - b.data)

    def bwd(g, needs):
        return g, -g

    return tape.record(out, (a, b), bwd)


def mul(tape, a, b):
    if a.data.shape != b.data.shape:
        raise DimensionError(f"mul: shape mismatch {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data * b.data)

    def bwd(g, needs):
        ga = g * b.data if needs[0] else None
        gb = g * a.data if needs[1] else None
        return ga, gb

    return tape.record(out, (a, b), bwd)


def scale(tape, x, c):
    c = float(c)
    out = Tensor(x.data * np.asarray(c, dtype=x.data.dtype))

    def bwd(g, needs):
        return (g * c,)

    return tape.record(out, (x,), bwd)


def sumall(tape, x):
    out = Tensor(np.asarray(x.data.sum(), dtype=x.data.dtype))

    def bwd(g, needs):
        return (np.broadcast_to(g, x.data.shape),)

    return tape.record(out, (x,), bwd)


def silu(tape, x):
    shape = x.data.shape
    out = Tensor(kernels.silu_fwd(_rows(x.data)).reshape(shape))

    def bwd(g, needs):
        return (kernels.silu_bwd(_rows(x.data), _rows(g)).reshape(shape),)

    return tape.record(out, (x,), bwd)


def softmax_rows(tape, x):
    shape = x.data.shape
    y = kernels.softmax_rows_fwd(_rows(x.data))
    out = Tensor(y.reshape(shape))

    def bwd(g, needs):
        return (kernels.softmax_rows_bwd(y, _rows(g)).reshape(shape),)

    return tape.record(out, (x,), bwd)


def rmsnorm_rows(tape, x, w, eps=1e-6):
    if w.data.ndim != 1 or w.data.shape[0] != x.data.shape[-1]:
        raise DimensionError("rmsnorm: gain must be 1-D over the feature axis")
    shape = x.data.shape
    x2 = _rows(x.data)
    y, inv = kernels.rmsnorm_fwd(x2, w.data, eps)
    out = Tensor(y.reshape(shape))

    def bwd(g, needs):
        gx, gw = kernels.rmsnorm_bwd(x2, w.data, inv, _rows(g))
        return gx.reshape(shape) if needs[0] else None, gw if needs[1] else None

    return tape.record(out, (x, w), bwd)


def embed(tape, table, tokens):
    """Row lookup. tokens is an integer ndarray, not a Tensor."""
    tokens = np.asarray(tokens)
    out = Tensor(table.data[tokens])

    def bwd(g, needs):
        if not needs[0]:
            return (None,)
        gt = np.zeros_like(table.data)
        np.add.at(gt, tokens.reshape(-1), g.reshape(-1, g.shape[-1]))
        return (gt,)

    return tape.record(out, (table,), bwd)


def split_heads(tape, x, n_heads):
    """[..., T, H*dh] -> [..., H, T, dh]"""
    *lead, t, f = x.data.shape
    if f % n_heads:
        raise DimensionError(f"split_heads: {f} features not divisible by {n_heads} heads")
    dh = f // n_heads
    out = Tensor(x.data.reshape(*lead, t, n_heads, dh).swapaxes(-3, -2).copy())

    def bwd(g, needs):
        return (g.swapaxes(-3, -2).reshape(*lead, t, f),)

    return tape.record(out, (x,), bwd)


def merge_heads(tape, x):
    """[..., H, T, dh] -> [..., T, H*dh]"""
    *lead, h, t, dh = x.data.shape
    out = Tensor(np.ascontiguousarray(x.data.swapaxes(-3, -2)).reshape(*lead, t, h * dh))

    def bwd(g, needs):
        return (np.ascontiguousarray(g.reshape(*lead, t, h, dh).swapaxes(-3, -2)),)

    return tape.record(out, (x,), bwd)


def rope(tape, x, cos, sin):
    """Rotary position encoding over the last axis, split-half layout.

    x is [..., T, dh]; cos/sin are [T, dh//2] ndarrays (not Tensors).
    """
    dh = x.data.shape[-1]
    half = dh // 2
    if dh % 2:
        raise DimensionError("rope requires an even head dimension")
    x1, x2 = x.data[..., :half], x.data[..., half:]
    y = np.empty_like(x.data)
    y[..., :half] = x1 * cos - x2 * sin
    y[..., half:] = x1 * sin + x2 * cos
    out = Tensor(y)

    def bwd(g, needs):
        g1, g2 = g[..., :half], g[..., half:]
        gx = np.empty_like(g)
        gx[..., :half] = g1 * cos + g2 * sin
        gx[..., half:] = g2 * cos - g1 * sin
        return (gx,)

    return tape.record(out, (x,), bwd)


_MASK_FILL = -1e30


def causal_attention(tape, q, k, v):
    """Scaled dot-product attention with a causal mask and grouped KV heads.

    q is [N, H, T, dh]; k and v are [N, KV, T, dh] with H divisible by KV.
    Query head h attends through KV head h // (H // KV). Returns [N, H, T, dh].
    """
    n, h, t, dh = q.data.shape
    kv = k.data.shape[1]
    if v.data.shape != k.data.shape:
        raise DimensionError("causal_attention: k and v shapes must match")
    if h % kv:
        raise DimensionError(f"causal_attention: {h} query heads not divisible by {kv} kv heads")
    group = h // kv
    s = 1.0 / np.sqrt(dh)
    q5 = q.data.reshape(n, kv, group, t, dh)
    k5 = k.data.reshape(n, kv, 1, t, dh)
    v5 = v.data.reshape(n, kv, 1, t, dh)
    bias = np.triu(np.full((t, t), _MASK_FILL, dtype=q.data.dtype), k=1)
    scores = q5 @ k5.swapaxes(-1, -2) * np.asarray(s, dtype=q.data.dtype) + bias
    probs = kernels.softmax_rows_fwd(scores.reshape(-1, t)).reshape(scores.shape)
    out = Tensor((probs @ v5).reshape(n, h, t, dh))

    def bwd(g, needs):
        g5 = g.reshape(n, kv, group, t, dh)
        gprobs = g5 @ v5.swapaxes(-1, -2)
        gscores = kernels.softmax_rows_bwd(
            probs.reshape(-1, t), gprobs.reshape(-1, t)
        ).reshape(probs.shape)
        gq = (gscores @ k5 * np.asarray(s, dtype=g.dtype)).reshape(n, h, t, dh) if needs[0] else None
        gk = None
        if needs[1]:
            gk = (gscores.swapaxes(-1, -2) @ q5).sum(axis=2) * np.asarray(s, dtype=g.dtype)
            gk = gk.reshape(n, kv, t, dh)
        gv = None
        if needs[2]:
            gv = (probs.swapaxes(-1, -2) @ g5).sum(axis=2).reshape(n, kv, t, dh)
        return gq, gk, gv

    return tape.record(out, (q, k, v), bwd)


def cross_entropy_mean(tape, logits, targets):
    """Mean token cross entropy. logits [..., V], integer targets [...]."""
    targets = np.asarray(targets)
    if targets.shape != logits.data.shape[:-1]:
        raise DimensionError(
            f"cross_entropy: target shape {targets.shape} != logit rows {logits.data.shape[:-1]}"
        )
    flat_t = targets.reshape(-1).astype(np.int64)
    loss, probs = kernels.cross_entropy_fwd(_rows(logits.data), flat_t)
    out = Tensor(np.asarray(loss, dtype=logits.data.dtype))

    def bwd(g, needs):
        gl = kernels.cross_entropy_bwd(probs, flat_t, float(g))
        return (gl.reshape(logits.data.shape),)

    return tape.record(out, (logits,), bwd)
