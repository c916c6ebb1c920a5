"""Kernel dispatch.

The compiled extension is used where one fused loop replaces a chain of
numpy temporaries: RMS normalization forward and backward, and squared
column sums. The transcendental-heavy kernels (softmax, SiLU, cross
entropy) stay on numpy, whose vectorized exp beats a scalar libm loop at
every shape we measured; benchmarks/bench_kernels.py holds the numbers
behind the split.

Float64 arrays (used by the gradient checks) always run pure. Set
PRUNESEARCH_KERNELS=pure to disable the extension or =fast to require it;
=fast raises if the extension is missing.
"""

import os

import numpy as np

from . import pure as _pure

_choice = os.environ.get("PRUNESEARCH_KERNELS", "auto")
if _choice not in ("auto", "fast", "pure"):
    raise RuntimeError(f"PRUNESEARCH_KERNELS must be auto, fast or pure, got {_choice!r}")

_fast = None
if _choice in ("auto", "fast"):
    try:
        from . import _ckernels as _fast
    except ImportError:
        if _choice == "fast":
            raise RuntimeError("PRUNESEARCH_KERNELS=fast but the compiled extension is not built")

BACKEND = "fast" if _fast is not None else "pure"

# dispatch-level routing for kernels where the compiled loop wins
COMPILED_ROUTES = ("rmsnorm_fwd", "rmsnorm_bwd", "sq_colsum")


def has_fast():
    return _fast is not None


def _use_fast(*arrays):
    return _fast is not None and all(a.dtype == np.float32 for a in arrays)


def _c2(a):
    return np.ascontiguousarray(a)


def softmax_rows_fwd(x):
    return _pure.softmax_rows_fwd(x)


def softmax_rows_bwd(y, gy):
    return _pure.softmax_rows_bwd(y, gy)


def rmsnorm_fwd(x, w, eps):
    if _use_fast(x, w):
        return _fast.rmsnorm_fwd(_c2(x), _c2(w), eps)
    return _pure.rmsnorm_fwd(x, w, eps)


def rmsnorm_bwd(x, w, inv, gy):
    if _use_fast(x, w, inv, gy):
        return _fast.rmsnorm_bwd(_c2(x), _c2(w), _c2(inv), _c2(gy))
    return _pure.rmsnorm_bwd(x, w, inv, gy)


def silu_fwd(x):
    return _pure.silu_fwd(x)


def silu_bwd(x, gy):
    return _pure.silu_bwd(x, gy)


def cross_entropy_fwd(logits, targets):
    return _pure.cross_entropy_fwd(logits, targets)


def cross_entropy_bwd(probs, targets, gscalar):
    return _pure.cross_entropy_bwd(probs, targets, gscalar)


def abs_colsum(w):
    return _pure.abs_colsum(w)


def sq_colsum(x):
    if _use_fast(x):
        return _fast.sq_colsum(_c2(x))
    return _pure.sq_colsum(x)
