# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row kernels for softmax and layer norm (float32 and float64)."""

import numpy as np
from libc.math cimport exp, expf, sqrt

ctypedef fused real:
    float
    double


def softmax_forward(real[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    out = np.empty((n, m), dtype=np.float32 if real is float else np.float64)
    cdef real[:, ::1] y = out
    cdef real mx, s
    with nogil:
        for i in range(n):
            mx = x[i, 0]
            for j in range(1, m):
                mx = x[i, j] if x[i, j] > mx else mx
            s = 0
            if real is float:
                for j in range(m):
                    y[i, j] = expf(x[i, j] - mx)
            else:
                for j in range(m):
                    y[i, j] = exp(x[i, j] - mx)
            for j in range(m):
                s += y[i, j]
            s = 1 / s
            for j in range(m):
                y[i, j] *= s
    return out


def softmax_backward(real[:, ::1] y, real[:, ::1] g):
    cdef Py_ssize_t n = y.shape[0], m = y.shape[1], i, j
    out = np.empty((n, m), dtype=np.float32 if real is float else np.float64)
    cdef real[:, ::1] gx = out
    cdef double dot
    with nogil:
        for i in range(n):
            dot = 0.0
            for j in range(m):
                dot += g[i, j] * y[i, j]
            for j in range(m):
                gx[i, j] = <real>(y[i, j] * (g[i, j] - dot))
    return out


def layer_norm_forward(real[:, ::1] x, real[::1] gain, real[::1] bias, double eps):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    dt = np.float32 if real is float else np.float64
    out = np.empty((n, m), dtype=dt)
    xh = np.empty((n, m), dtype=dt)
    rs = np.empty(n, dtype=dt)
    cdef real[:, ::1] y = out
    cdef real[:, ::1] xhat = xh
    cdef real[::1] rstd = rs
    cdef double mean, var, d, r
    with nogil:
        for i in range(n):
            mean = 0.0
            for j in range(m):
                mean += x[i, j]
            mean /= m
            var = 0.0
            for j in range(m):
                d = x[i, j] - mean
                var += d * d
            var /= m
            r = 1.0 / sqrt(var + eps)
            rstd[i] = <real>r
            for j in range(m):
                d = (x[i, j] - mean) * r
                xhat[i, j] = <real>d
                y[i, j] = <real>(d * gain[j] + bias[j])
    return out, xh, rs


def layer_norm_backward(real[:, ::1] g, real[:, ::1] xhat, real[::1] rstd, real[::1] gain):
    cdef Py_ssize_t n = g.shape[0], m = g.shape[1], i, j
    dt = np.float32 if real is float else np.float64
    gx_arr = np.empty((n, m), dtype=dt)
    gg_arr = np.zeros(m, dtype=np.float64)
    gb_arr = np.zeros(m, dtype=np.float64)
    cdef real[:, ::1] gx = gx_arr
    cdef double[::1] ggain = gg_arr
    cdef double[::1] gbias = gb_arr
    cdef double s1, s2, gh
    with nogil:
        for i in range(n):
            s1 = 0.0
            s2 = 0.0
            for j in range(m):
                gh = g[i, j] * gain[j]
                s1 += gh
                s2 += gh * xhat[i, j]
                ggain[j] += g[i, j] * xhat[i, j]
                gbias[j] += g[i, j]
            s1 /= m
            s2 /= m
            for j in range(m):
                gx[i, j] = <real>((g[i, j] * gain[j] - s1 - xhat[i, j] * s2) * rstd[i])
    return gx_arr, gg_arr.astype(dt), gb_arr.astype(dt)
