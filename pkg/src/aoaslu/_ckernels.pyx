# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row kernels: masked softmax, layer norm and tanh-GELU.

Single-pass loops over each row; no temporaries beyond the outputs. Same
signatures and semantics as ``_pykernels``.
"""

import numpy as np

from libc.math cimport exp, sqrt

from .errors import DegenerateRowError

ctypedef fused real:
    float
    double

cdef double GELU_C = 0.7978845608028654
cdef double GELU_A = 0.044715


cdef inline double _tanh(double u) noexcept nogil:
    # libm tanh is several times slower than exp; exp overflow still gives +-1
    return 1.0 - 2.0 / (exp(2.0 * u) + 1.0)


cdef int _softmax_rows(real[:, ::1] x, const unsigned char[:, ::1] mask,
                       bint has_mask, real[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    cdef double mx, s, v
    cdef bint seen
    for i in range(n):
        seen = False
        mx = 0.0
        for j in range(m):
            if has_mask and not mask[i, j]:
                continue
            if not seen or x[i, j] > mx:
                mx = x[i, j]
                seen = True
        if not seen:
            return -1
        s = 0.0
        for j in range(m):
            if has_mask and not mask[i, j]:
                out[i, j] = 0
            else:
                v = exp(x[i, j] - mx)
                out[i, j] = <real>v
                s += v
        for j in range(m):
            out[i, j] = <real>(out[i, j] / s)
    return 0


def softmax_forward(real[:, ::1] x, mask=None):
    out_arr = np.empty_like(np.asarray(x))
    cdef real[:, ::1] out = out_arr
    cdef const unsigned char[:, ::1] mv
    cdef int rc
    if mask is None:
        mv = np.ones((1, 1), dtype=np.uint8)
        with nogil:
            rc = _softmax_rows(x, mv, False, out)
    else:
        mv = np.ascontiguousarray(mask).view(np.uint8)
        with nogil:
            rc = _softmax_rows(x, mv, True, out)
    if rc != 0:
        raise DegenerateRowError("softmax row has no unmasked entry")
    return out_arr


def softmax_backward(real[:, ::1] y, real[:, ::1] gy):
    out_arr = np.empty_like(np.asarray(y))
    cdef real[:, ::1] out = out_arr
    cdef Py_ssize_t n = y.shape[0], m = y.shape[1], i, j
    cdef double dot
    with nogil:
        for i in range(n):
            dot = 0.0
            for j in range(m):
                dot += gy[i, j] * y[i, j]
            for j in range(m):
                out[i, j] = <real>(y[i, j] * (gy[i, j] - dot))
    return out_arr


def layer_norm_forward(real[:, ::1] x, real[::1] gamma, real[::1] beta, double eps):
    x_arr = np.asarray(x)
    y_arr = np.empty_like(x_arr)
    xhat_arr = np.empty_like(x_arr)
    rstd_arr = np.empty(x.shape[0], dtype=x_arr.dtype)
    cdef real[:, ::1] y = y_arr
    cdef real[:, ::1] xhat = xhat_arr
    cdef real[::1] rstd = rstd_arr
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    cdef double mean, var, c, r
    with nogil:
        for i in range(n):
            mean = 0.0
            for j in range(d):
                mean += x[i, j]
            mean /= d
            var = 0.0
            for j in range(d):
                c = x[i, j] - mean
                var += c * c
            var /= d
            r = 1.0 / sqrt(var + eps)
            rstd[i] = <real>r
            for j in range(d):
                c = (x[i, j] - mean) * r
                xhat[i, j] = <real>c
                y[i, j] = <real>(c * gamma[j] + beta[j])
    return y_arr, xhat_arr, rstd_arr


def layer_norm_backward(real[:, ::1] gy, real[:, ::1] xhat, real[::1] rstd, real[::1] gamma):
    xh_arr = np.asarray(xhat)
    gx_arr = np.empty_like(xh_arr)
    gg_arr = np.zeros(xhat.shape[1], dtype=xh_arr.dtype)
    gb_arr = np.zeros(xhat.shape[1], dtype=xh_arr.dtype)
    cdef real[:, ::1] gx = gx_arr
    cdef real[::1] gg = gg_arr
    cdef real[::1] gb = gb_arr
    cdef Py_ssize_t n = xhat.shape[0], d = xhat.shape[1], i, j
    cdef double m1, m2, g
    with nogil:
        for i in range(n):
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                g = gy[i, j] * gamma[j]
                m1 += g
                m2 += g * xhat[i, j]
                gg[j] += gy[i, j] * xhat[i, j]
                gb[j] += gy[i, j]
            m1 /= d
            m2 /= d
            for j in range(d):
                g = gy[i, j] * gamma[j]
                gx[i, j] = <real>(rstd[i] * (g - m1 - xhat[i, j] * m2))
    return gx_arr, gg_arr, gb_arr


def gelu_forward(real[:, ::1] x):
    out_arr = np.empty_like(np.asarray(x))
    cdef real[:, ::1] out = out_arr
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    cdef double v
    with nogil:
        for i in range(n):
            for j in range(m):
                v = x[i, j]
                out[i, j] = <real>(0.5 * v * (1.0 + _tanh(GELU_C * (v + GELU_A * v * v * v))))
    return out_arr


def gelu_backward(real[:, ::1] x, real[:, ::1] gy):
    out_arr = np.empty_like(np.asarray(x))
    cdef real[:, ::1] out = out_arr
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    cdef double v, v2, t
    with nogil:
        for i in range(n):
            for j in range(m):
                v = x[i, j]
                v2 = v * v
                t = _tanh(GELU_C * (v + GELU_A * v2 * v))
                out[i, j] = <real>(gy[i, j] * (0.5 * (1.0 + t)
                                   + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v2)))
    return out_arr
