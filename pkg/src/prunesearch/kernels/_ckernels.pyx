# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled float32 kernels.

Row-wise softmax, RMS normalization, SiLU and token cross entropy, forward
and backward. Row reductions accumulate in double and loops run without the
GIL. The pure numpy twins live in prunesearch.kernels.pure; dispatch happens
in prunesearch.kernels.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport expf, log, sqrt

cnp.import_array()

ctypedef cnp.float32_t f32
ctypedef cnp.float64_t f64
ctypedef cnp.int64_t i64


def softmax_rows_fwd(f32[:, ::1] x):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1]
    out = np.empty((rows, cols), dtype=np.float32)
    cdef f32[:, ::1] y = out
    cdef Py_ssize_t i, j
    cdef f32 m, v
    cdef f64 s
    with nogil:
        for i in range(rows):
            m = x[i, 0]
            for j in range(1, cols):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(cols):
                v = expf(x[i, j] - m)
                y[i, j] = v
                s += v
            for j in range(cols):
                y[i, j] = <f32> (y[i, j] / s)
    return out


def softmax_rows_bwd(f32[:, ::1] y, f32[:, ::1] gy):
    cdef Py_ssize_t rows = y.shape[0], cols = y.shape[1]
    out = np.empty((rows, cols), dtype=np.float32)
    cdef f32[:, ::1] gx = out
    cdef Py_ssize_t i, j
    cdef f64 inner
    with nogil:
        for i in range(rows):
            inner = 0.0
            for j in range(cols):
                inner += <f64> y[i, j] * <f64> gy[i, j]
            for j in range(cols):
                gx[i, j] = <f32> (y[i, j] * (gy[i, j] - inner))
    return out


def rmsnorm_fwd(f32[:, ::1] x, f32[::1] w, double eps):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1]
    out = np.empty((rows, cols), dtype=np.float32)
    inv_out = np.empty(rows, dtype=np.float32)
    cdef f32[:, ::1] y = out
    cdef f32[::1] inv = inv_out
    cdef Py_ssize_t i, j
    cdef f64 ms
    cdef f32 r
    with nogil:
        for i in range(rows):
            ms = 0.0
            for j in range(cols):
                ms += <f64> x[i, j] * <f64> x[i, j]
            r = <f32> (1.0 / sqrt(ms / cols + eps))
            inv[i] = r
            for j in range(cols):
                y[i, j] = x[i, j] * r * w[j]
    return out, inv_out


def rmsnorm_bwd(f32[:, ::1] x, f32[::1] w, f32[::1] inv, f32[:, ::1] gy):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1]
    gx_out = np.empty((rows, cols), dtype=np.float32)
    gw_acc = np.zeros(cols, dtype=np.float64)
    cdef f32[:, ::1] gx = gx_out
    cdef f64[::1] gw = gw_acc
    cdef Py_ssize_t i, j
    cdef f64 dot, r, scale
    with nogil:
        for i in range(rows):
            r = inv[i]
            dot = 0.0
            for j in range(cols):
                dot += <f64> gy[i, j] * <f64> w[j] * <f64> x[i, j]
            scale = r * r * dot / cols
            for j in range(cols):
                gx[i, j] = <f32> (r * (<f64> gy[i, j] * <f64> w[j] - <f64> x[i, j] * scale))
                gw[j] += <f64> gy[i, j] * <f64> x[i, j] * r
    return gx_out, gw_acc.astype(np.float32)


def silu_fwd(f32[:, ::1] x):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1]
    out = np.empty((rows, cols), dtype=np.float32)
    cdef f32[:, ::1] y = out
    cdef Py_ssize_t i, j
    cdef f32 s
    with nogil:
        for i in range(rows):
            for j in range(cols):
                s = <f32> (1.0 / (1.0 + expf(-x[i, j])))
                y[i, j] = x[i, j] * s
    return out


def silu_bwd(f32[:, ::1] x, f32[:, ::1] gy):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1]
    out = np.empty((rows, cols), dtype=np.float32)
    cdef f32[:, ::1] gx = out
    cdef Py_ssize_t i, j
    cdef f32 s
    with nogil:
        for i in range(rows):
            for j in range(cols):
                s = <f32> (1.0 / (1.0 + expf(-x[i, j])))
                gx[i, j] = gy[i, j] * s * (1.0 + x[i, j] * (1.0 - s))
    return out


def cross_entropy_fwd(f32[:, ::1] logits, i64[::1] targets):
    cdef Py_ssize_t rows = logits.shape[0], cols = logits.shape[1]
    probs_out = np.empty((rows, cols), dtype=np.float32)
    cdef f32[:, ::1] probs = probs_out
    cdef Py_ssize_t i, j
    cdef f32 m, v
    cdef f64 s, acc = 0.0
    with nogil:
        for i in range(rows):
            m = logits[i, 0]
            for j in range(1, cols):
                if logits[i, j] > m:
                    m = logits[i, j]
            s = 0.0
            for j in range(cols):
                v = expf(logits[i, j] - m)
                probs[i, j] = v
                s += v
            for j in range(cols):
                probs[i, j] = <f32> (probs[i, j] / s)
            acc += (<f64> m + log(s)) - <f64> logits[i, targets[i]]
    return acc / rows, probs_out


def cross_entropy_bwd(f32[:, ::1] probs, i64[::1] targets, double gscalar):
    cdef Py_ssize_t rows = probs.shape[0], cols = probs.shape[1]
    out = np.empty((rows, cols), dtype=np.float32)
    cdef f32[:, ::1] g = out
    cdef f64 scale = gscalar / rows
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(rows):
            for j in range(cols):
                g[i, j] = <f32> (probs[i, j] * scale)
            g[i, targets[i]] -= <f32> scale
    return out


def abs_colsum(f32[:, ::1] w):
    cdef Py_ssize_t rows = w.shape[0], cols = w.shape[1]
    acc = np.zeros(cols, dtype=np.float64)
    cdef f64[::1] out = acc
    cdef Py_ssize_t i, j
    cdef f32 v
    with nogil:
        for i in range(rows):
            for j in range(cols):
                v = w[i, j]
                out[j] += v if v >= 0 else -v
    return acc


def sq_colsum(f32[:, ::1] x):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1]
    acc = np.zeros(cols, dtype=np.float64)
    cdef f64[::1] out = acc
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(rows):
            for j in range(cols):
                out[j] += <f64> x[i, j] * <f64> x[i, j]
    return acc
