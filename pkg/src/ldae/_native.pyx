# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled fused kernels for the denoiser hot path.

Each function mirrors a pure-numpy reference in ldae.kernels; the dispatcher
there picks this module when it imported successfully. All inputs are
C-contiguous float64 arrays. Shapes are (rows, cols) with the reduction
running over the last axis.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, sqrt, tanh

cnp.import_array()

DEF GELU_C = 0.7978845608028654   # sqrt(2/pi)
DEF GELU_A = 0.044715


def layernorm_fwd(double[:, ::1] x, double eps):
    cdef Py_ssize_t r = x.shape[0], c = x.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] xhat = np.empty((r, c))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] inv_std = np.empty(r)
    cdef double[:, ::1] xh = xhat
    cdef double[::1] istd = inv_std
    cdef Py_ssize_t i, j
    cdef double mu, var, d, s
    with nogil:
        for i in range(r):
            mu = 0.0
            for j in range(c):
                mu += x[i, j]
            mu /= c
            var = 0.0
            for j in range(c):
                d = x[i, j] - mu
                var += d * d
            var /= c
            s = 1.0 / sqrt(var + eps)
            istd[i] = s
            for j in range(c):
                xh[i, j] = (x[i, j] - mu) * s
    return xhat, inv_std


def layernorm_bwd(double[:, ::1] dxhat, double[:, ::1] xhat, double[::1] inv_std):
    cdef Py_ssize_t r = dxhat.shape[0], c = dxhat.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] dx = np.empty((r, c))
    cdef double[:, ::1] out = dx
    cdef Py_ssize_t i, j
    cdef double m1, m2
    with nogil:
        for i in range(r):
            m1 = 0.0
            m2 = 0.0
            for j in range(c):
                m1 += dxhat[i, j]
                m2 += dxhat[i, j] * xhat[i, j]
            m1 /= c
            m2 /= c
            for j in range(c):
                out[i, j] = inv_std[i] * (dxhat[i, j] - m1 - xhat[i, j] * m2)
    return dx


def softmax_fwd(double[:, ::1] x):
    cdef Py_ssize_t r = x.shape[0], c = x.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] p = np.empty((r, c))
    cdef double[:, ::1] out = p
    cdef Py_ssize_t i, j
    cdef double m, s
    with nogil:
        for i in range(r):
            m = x[i, 0]
            for j in range(1, c):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(c):
                out[i, j] = exp(x[i, j] - m)
                s += out[i, j]
            for j in range(c):
                out[i, j] /= s
    return p


def softmax_bwd(double[:, ::1] dp, double[:, ::1] p):
    cdef Py_ssize_t r = dp.shape[0], c = dp.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] dx = np.empty((r, c))
    cdef double[:, ::1] out = dx
    cdef Py_ssize_t i, j
    cdef double dot
    with nogil:
        for i in range(r):
            dot = 0.0
            for j in range(c):
                dot += dp[i, j] * p[i, j]
            for j in range(c):
                out[i, j] = p[i, j] * (dp[i, j] - dot)
    return dx


def gelu_fwd(double[::1] x):
    cdef Py_ssize_t n = x.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] y = np.empty(n)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] t = np.empty(n)
    cdef double[::1] yv = y, tv = t
    cdef Py_ssize_t i
    cdef double u
    with nogil:
        for i in range(n):
            u = GELU_C * (x[i] + GELU_A * x[i] * x[i] * x[i])
            tv[i] = tanh(u)
            yv[i] = 0.5 * x[i] * (1.0 + tv[i])
    return y, t


def gelu_bwd(double[::1] dout, double[::1] x, double[::1] t):
    cdef Py_ssize_t n = dout.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] dx = np.empty(n)
    cdef double[::1] out = dx
    cdef Py_ssize_t i
    cdef double sech2, du
    with nogil:
        for i in range(n):
            sech2 = 1.0 - t[i] * t[i]
            du = GELU_C * (1.0 + 3.0 * GELU_A * x[i] * x[i])
            out[i] = dout[i] * (0.5 * (1.0 + t[i]) + 0.5 * x[i] * sech2 * du)
    return dx
