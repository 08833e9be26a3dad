# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row-wise kernels. Every function takes 2-D C-contiguous float64 arrays
(rows x width) and mirrors a function of the same name in ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, erf, M_PI

cnp.import_array()

cdef double INV_SQRT2 = 0.7071067811865476


def softmax_forward(const double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    cdef double m, s
    out = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] y = out
    for i in range(n):
        m = x[i, 0]
        for j in range(1, d):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(d):
            y[i, j] = exp(x[i, j] - m)
            s += y[i, j]
        for j in range(d):
            y[i, j] /= s
    return out


def softmax_backward(const double[:, ::1] y, const double[:, ::1] g):
    cdef Py_ssize_t n = y.shape[0], d = y.shape[1], i, j
    cdef double dot
    out = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] dx = out
    for i in range(n):
        dot = 0.0
        for j in range(d):
            dot += g[i, j] * y[i, j]
        for j in range(d):
            dx[i, j] = y[i, j] * (g[i, j] - dot)
    return out


def layer_norm_forward(const double[:, ::1] x, const double[::1] gamma,
                       const double[::1] beta, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    cdef double mean, var, r, diff
    out = np.empty((n, d), dtype=np.float64)
    xhat_arr = np.empty((n, d), dtype=np.float64)
    rstd_arr = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] y = out
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] rstd = rstd_arr
    for i in range(n):
        mean = 0.0
        for j in range(d):
            mean += x[i, j]
        mean /= d
        var = 0.0
        for j in range(d):
            diff = x[i, j] - mean
            var += diff * diff
        var /= d
        r = 1.0 / sqrt(var + eps)
        rstd[i] = r
        for j in range(d):
            xhat[i, j] = (x[i, j] - mean) * r
            y[i, j] = xhat[i, j] * gamma[j] + beta[j]
    return out, xhat_arr, rstd_arr


def layer_norm_backward(const double[:, ::1] g, const double[:, ::1] xhat,
                        const double[::1] rstd, const double[::1] gamma):
    cdef Py_ssize_t n = g.shape[0], d = g.shape[1], i, j
    cdef double mean_dy, mean_dy_xhat, dy
    dx_arr = np.empty((n, d), dtype=np.float64)
    dgamma_arr = np.zeros(d, dtype=np.float64)
    dbeta_arr = np.zeros(d, dtype=np.float64)
    cdef double[:, ::1] dx = dx_arr
    cdef double[::1] dgamma = dgamma_arr
    cdef double[::1] dbeta = dbeta_arr
    for i in range(n):
        mean_dy = 0.0
        mean_dy_xhat = 0.0
        for j in range(d):
            dy = g[i, j] * gamma[j]
            mean_dy += dy
            mean_dy_xhat += dy * xhat[i, j]
            dgamma[j] += g[i, j] * xhat[i, j]
            dbeta[j] += g[i, j]
        mean_dy /= d
        mean_dy_xhat /= d
        for j in range(d):
            dx[i, j] = rstd[i] * (g[i, j] * gamma[j] - mean_dy - xhat[i, j] * mean_dy_xhat)
    return dx_arr, dgamma_arr, dbeta_arr


def gelu_forward(const double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    out = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] y = out
    for i in range(n):
        for j in range(d):
            y[i, j] = 0.5 * x[i, j] * (1.0 + erf(x[i, j] * INV_SQRT2))
    return out


def gelu_backward(const double[:, ::1] x, const double[:, ::1] g):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    cdef double v, pdf
    cdef double inv_sqrt_2pi = 1.0 / sqrt(2.0 * M_PI)
    out = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] dx = out
    for i in range(n):
        for j in range(d):
            v = x[i, j]
            pdf = exp(-0.5 * v * v) * inv_sqrt_2pi
            dx[i, j] = g[i, j] * (0.5 * (1.0 + erf(v * INV_SQRT2)) + v * pdf)
    return out
