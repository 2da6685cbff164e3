# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled elementwise kernels for the training loop.

Operation order matches ``_kernels_py``; built without fast-math or FMA
contraction so results are bit-identical to the numpy fallback.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt
from libc.stdint cimport int64_t, uint64_t
from libc.string cimport memcpy

cnp.import_array()


def bias_act_forward(double[:, ::1] z, const double[::1] bias, slope):
    cdef Py_ssize_t n = z.shape[0], k = z.shape[1], i, j
    cdef double acc = 0.0, x, y, s
    cdef double *zp
    cdef double *op
    if bias.shape[0] != k:
        raise ValueError("bias length does not match z columns")
    if slope is None or n == 0:
        out = np.asarray(z) if slope is None else np.empty((n, k))
    else:
        out = np.empty((n, k), dtype=np.float64)
    cdef double[:, ::1] o = out
    s = 1.0 if slope is None else slope
    if n == 0:
        return out, True
    # x * 0.0 is NaN exactly when x is inf or NaN, so acc flags any non-finite value
    with nogil:
        for i in range(n):
            zp = &z[i, 0]
            op = &o[i, 0]
            for j in range(k):
                x = zp[j] + bias[j]
                zp[j] = x
                acc = acc + x * 0.0
                # for 0 < s < 1, max(x, s*x) is the leaky ReLU; compiles to maxsd
                y = s * x
                op[j] = x if x > y else y
    return out, acc == 0.0


def leaky_relu_backward(const double[:, ::1] grad, const double[:, ::1] z, double slope):
    cdef Py_ssize_t n = grad.shape[0], k = grad.shape[1], i
    cdef const double *gd
    cdef const uint64_t *gb
    cdef const double *zp
    cdef uint64_t *dp
    cdef double y
    cdef uint64_t yb, msk
    if z.shape[0] != n or z.shape[1] != k:
        raise ValueError("grad and z shapes differ")
    delta = np.empty((n, k), dtype=np.float64)
    if n == 0 or k == 0:
        return delta, np.zeros(k)
    cdef double[:, ::1] d = delta
    gd = &grad[0, 0]
    gb = <const uint64_t *>gd
    zp = &z[0, 0]
    dp = <uint64_t *>&d[0, 0]
    with nogil:
        for i in range(n * k):
            # bitwise select of grad vs slope*grad on z < 0, branch free
            y = slope * gd[i]
            memcpy(&yb, &y, 8)
            msk = <uint64_t>(-<int64_t>(zp[i] < 0.0))
            dp[i] = (gb[i] & ~msk) | (yb & msk)
    # column sums in numpy so the reduction order matches the fallback
    return delta, delta.sum(axis=0)


def add_l1_subgradient(cnp.ndarray grad, cnp.ndarray weights, double coef):
    cdef double[::1] g = grad.reshape(-1)
    cdef const double[::1] w = np.ascontiguousarray(weights, dtype=np.float64).reshape(-1)
    cdef Py_ssize_t i, n = g.shape[0]
    cdef double s
    if w.shape[0] != n:
        raise ValueError("grad and weights must have the same size")
    with nogil:
        for i in range(n):
            s = (w[i] > 0.0) - (w[i] < 0.0)
            g[i] = g[i] + coef * s
    return grad


def adam_update(cnp.ndarray param, cnp.ndarray grad, cnp.ndarray m, cnp.ndarray v,
                double lr, double beta1, double beta2, double eps,
                double corr1, double corr2):
    cdef double[::1] p = param.reshape(-1)
    cdef const double[::1] g = np.ascontiguousarray(grad, dtype=np.float64).reshape(-1)
    cdef double[::1] mm = m.reshape(-1)
    cdef double[::1] vv = v.reshape(-1)
    cdef Py_ssize_t i, n = p.shape[0]
    cdef double gi, a1 = 1.0 - beta1, a2 = 1.0 - beta2
    if g.shape[0] != n or mm.shape[0] != n or vv.shape[0] != n:
        raise ValueError("param, grad and moments must have the same size")
    with nogil:
        for i in range(n):
            gi = g[i]
            mm[i] = mm[i] * beta1 + a1 * gi
            vv[i] = vv[i] * beta2 + a2 * (gi * gi)
            p[i] = p[i] - lr * (mm[i] / corr1) / (sqrt(vv[i] / corr2) + eps)
