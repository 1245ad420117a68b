# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled implementations of the hot kernels.

Mirrors kernels.pure function by function: float64 in, float64 out, uint8
masks with 1 = allowed. Each row of a mask is assumed to have at least one
allowed entry; the caller validates that before dispatching here.
"""

from libc.math cimport exp, sqrt, tanh

import numpy as np

NAME = "compiled"

cdef double GELU_C = 0.7978845608028654  # sqrt(2 / pi)
cdef double GELU_A = 0.044715
cdef double NEG_INF = float("-inf")


def masked_softmax(const double[:, ::1] scores, const unsigned char[:, ::1] mask):
    cdef Py_ssize_t n = scores.shape[0]
    cdef Py_ssize_t m = scores.shape[1]
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double rowmax, total, e
    for i in range(n):
        rowmax = NEG_INF
        for j in range(m):
            if mask[i, j] and scores[i, j] > rowmax:
                rowmax = scores[i, j]
        total = 0.0
        for j in range(m):
            if mask[i, j]:
                e = exp(scores[i, j] - rowmax)
                out[i, j] = e
                total += e
            else:
                out[i, j] = 0.0
        for j in range(m):
            out[i, j] /= total
    return out_arr


def masked_softmax_grad(const double[:, ::1] probs, const double[:, ::1] grad_out,
                        const unsigned char[:, ::1] mask):
    cdef Py_ssize_t n = probs.shape[0]
    cdef Py_ssize_t m = probs.shape[1]
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double dot
    for i in range(n):
        dot = 0.0
        for j in range(m):
            dot += probs[i, j] * grad_out[i, j]
        for j in range(m):
            out[i, j] = probs[i, j] * (grad_out[i, j] - dot)
    return out_arr


def layernorm(const double[:, ::1] x, const double[::1] gain,
              const double[::1] bias, double eps):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t d = x.shape[1]
    y_arr = np.empty((n, d), dtype=np.float64)
    xhat_arr = np.empty((n, d), dtype=np.float64)
    inv_arr = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] y = y_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] inv_std = inv_arr
    cdef Py_ssize_t i, j
    cdef double mu, var, c, s, h
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            c = x[i, j] - mu
            var += c * c
        var /= d
        s = 1.0 / sqrt(var + eps)
        inv_std[i] = s
        for j in range(d):
            h = (x[i, j] - mu) * s
            xhat[i, j] = h
            y[i, j] = h * gain[j] + bias[j]
    return y_arr, xhat_arr, inv_arr


def layernorm_grad(const double[:, ::1] grad_out, const double[:, ::1] xhat,
                   const double[::1] inv_std, const double[::1] gain):
    cdef Py_ssize_t n = grad_out.shape[0]
    cdef Py_ssize_t d = grad_out.shape[1]
    dx_arr = np.empty((n, d), dtype=np.float64)
    dgain_arr = np.zeros(d, dtype=np.float64)
    dbias_arr = np.zeros(d, dtype=np.float64)
    cdef double[:, ::1] dx = dx_arr
    cdef double[::1] dgain = dgain_arr
    cdef double[::1] dbias = dbias_arr
    cdef Py_ssize_t i, j
    cdef double m1, m2, dh
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            dh = grad_out[i, j] * gain[j]
            m1 += dh
            m2 += dh * xhat[i, j]
        m1 /= d
        m2 /= d
        for j in range(d):
            dh = grad_out[i, j] * gain[j]
            dx[i, j] = inv_std[i] * (dh - m1 - xhat[i, j] * m2)
            dgain[j] += grad_out[i, j] * xhat[i, j]
            dbias[j] += grad_out[i, j]
    return dx_arr, dgain_arr, dbias_arr


def gelu(const double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t m = x.shape[1]
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double v
    for i in range(n):
        for j in range(m):
            v = x[i, j]
            out[i, j] = 0.5 * v * (1.0 + tanh(GELU_C * (v + GELU_A * v * v * v)))
    return out_arr


def gelu_grad(const double[:, ::1] x, const double[:, ::1] grad_out):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t m = x.shape[1]
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double v, x2, t, du
    for i in range(n):
        for j in range(m):
            v = x[i, j]
            x2 = v * v
            t = tanh(GELU_C * v * (1.0 + GELU_A * x2))
            du = GELU_C * (1.0 + 3.0 * GELU_A * x2)
            out[i, j] = grad_out[i, j] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
    return out_arr
