# cython: boundscheck=False, wraparound=False, cdivision=True
"""Fused single-pass kernels for the training hot path.

Numerically equivalent to ``fallback.py`` up to summation order; call
signatures are identical so the backend can be swapped at import time.
"""

import numpy as np

cimport cython
from libc.math cimport erf, exp, pow, sqrt

ctypedef fused real:
    float
    double

DEF INV_SQRT2 = 0.7071067811865475
DEF INV_SQRT2PI = 0.3989422804014327


def softmax_fwd(real[:, ::1] x):
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1]
    out_np = np.empty((rows, n), dtype=np.asarray(x).dtype)
    cdef real[:, ::1] out = out_np
    cdef Py_ssize_t i, j
    cdef real m, s
    for i in range(rows):
        m = x[i, 0]
        for j in range(1, n):
            if x[i, j] > m:
                m = x[i, j]
        s = 0
        for j in range(n):
            out[i, j] = <real>exp(x[i, j] - m)
            s += out[i, j]
        for j in range(n):
            out[i, j] /= s
    return out_np


def softmax_bwd(real[:, ::1] y, real[:, ::1] gy):
    cdef Py_ssize_t rows = y.shape[0], n = y.shape[1]
    gx_np = np.empty((rows, n), dtype=np.asarray(y).dtype)
    cdef real[:, ::1] gx = gx_np
    cdef Py_ssize_t i, j
    cdef real dot
    for i in range(rows):
        dot = 0
        for j in range(n):
            dot += y[i, j] * gy[i, j]
        for j in range(n):
            gx[i, j] = y[i, j] * (gy[i, j] - dot)
    return gx_np


def layernorm_fwd(real[:, ::1] x, real[::1] gain, real[::1] bias, double eps):
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1]
    dtype = np.asarray(x).dtype
    y_np = np.empty((rows, n), dtype=dtype)
    xhat_np = np.empty((rows, n), dtype=dtype)
    rstd_np = np.empty(rows, dtype=dtype)
    cdef real[:, ::1] y = y_np
    cdef real[:, ::1] xhat = xhat_np
    cdef real[::1] rstd = rstd_np
    cdef Py_ssize_t i, j
    cdef real mu, var, d, r
    for i in range(rows):
        mu = 0
        for j in range(n):
            mu += x[i, j]
        mu /= n
        var = 0
        for j in range(n):
            d = x[i, j] - mu
            var += d * d
        var /= n
        r = <real>(1.0 / sqrt(var + eps))
        rstd[i] = r
        for j in range(n):
            xhat[i, j] = (x[i, j] - mu) * r
            y[i, j] = xhat[i, j] * gain[j] + bias[j]
    return y_np, xhat_np, rstd_np


def layernorm_bwd(real[:, ::1] xhat, real[::1] rstd, real[::1] gain,
                  real[:, ::1] gy):
    cdef Py_ssize_t rows = xhat.shape[0], n = xhat.shape[1]
    dtype = np.asarray(xhat).dtype
    gx_np = np.empty((rows, n), dtype=dtype)
    ggain_np = np.zeros(n, dtype=dtype)
    gbias_np = np.zeros(n, dtype=dtype)
    cdef real[:, ::1] gx = gx_np
    cdef real[::1] ggain = ggain_np
    cdef real[::1] gbias = gbias_np
    cdef Py_ssize_t i, j
    cdef real m1, m2, gg
    for i in range(rows):
        m1 = 0
        m2 = 0
        for j in range(n):
            gg = gy[i, j] * gain[j]
            m1 += gg
            m2 += gg * xhat[i, j]
        m1 /= n
        m2 /= n
        for j in range(n):
            gg = gy[i, j] * gain[j]
            gx[i, j] = (gg - m1 - xhat[i, j] * m2) * rstd[i]
            ggain[j] += gy[i, j] * xhat[i, j]
            gbias[j] += gy[i, j]
    return gx_np, ggain_np, gbias_np


def gelu_fwd(real[::1] x):
    cdef Py_ssize_t n = x.shape[0]
    out_np = np.empty(n, dtype=np.asarray(x).dtype)
    cdef real[::1] out = out_np
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = <real>(0.5 * x[i] * (1.0 + erf(x[i] * INV_SQRT2)))
    return out_np


def gelu_bwd(real[::1] x, real[::1] gy):
    cdef Py_ssize_t n = x.shape[0]
    gx_np = np.empty(n, dtype=np.asarray(x).dtype)
    cdef real[::1] gx = gx_np
    cdef Py_ssize_t i
    cdef double cdf, pdf
    for i in range(n):
        cdf = 0.5 * (1.0 + erf(x[i] * INV_SQRT2))
        pdf = exp(-0.5 * x[i] * x[i]) * INV_SQRT2PI
        gx[i] = <real>(gy[i] * (cdf + x[i] * pdf))
    return gx_np


def adamw_update(real[::1] p, real[::1] g, real[::1] m, real[::1] v,
                 double lr, double beta1, double beta2, double eps,
                 double wd, long t):
    cdef Py_ssize_t n = p.shape[0]
    cdef double inv_bc1 = 1.0 / (1.0 - pow(beta1, t))
    cdef double inv_bc2 = 1.0 / (1.0 - pow(beta2, t))
    cdef double decay = 1.0 - lr * wd
    cdef Py_ssize_t i
    for i in range(n):
        m[i] = <real>(beta1 * m[i] + (1.0 - beta1) * g[i])
        v[i] = <real>(beta2 * v[i] + (1.0 - beta2) * g[i] * g[i])
        if wd != 0.0:
            p[i] = <real>(p[i] * decay)
        p[i] = <real>(p[i] - (lr * inv_bc1) * m[i] / (sqrt(v[i] * inv_bc2) + eps))
