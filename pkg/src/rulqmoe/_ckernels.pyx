# cython: language_level=3
"""Compiled kernels for the per-element loops of training and inference."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log1p, erfc, fabs

cnp.import_array()

cdef double INV_SQRT_2PI = 0.3989422804014327
cdef double INV_SQRT_2 = 0.7071067811865476


cdef inline double _softplus(double x) nogil:
    if x > 0:
        return x + log1p(exp(-x))
    return log1p(exp(x))


cdef inline double _sigmoid(double x) nogil:
    cdef double e = exp(-fabs(x))
    if x >= 0:
        return 1.0 / (1.0 + e)
    return e / (1.0 + e)


def softplus(x):
    arr = np.ascontiguousarray(x, dtype=np.float64)
    out = np.empty_like(arr)
    cdef double[::1] src = arr.reshape(-1)
    cdef double[::1] dst = out.reshape(-1)
    cdef Py_ssize_t i, n = src.shape[0]
    with nogil:
        for i in range(n):
            dst[i] = _softplus(src[i])
    return out


def sigmoid(x):
    arr = np.ascontiguousarray(x, dtype=np.float64)
    out = np.empty_like(arr)
    cdef double[::1] src = arr.reshape(-1)
    cdef double[::1] dst = out.reshape(-1)
    cdef Py_ssize_t i, n = src.shape[0]
    with nogil:
        for i in range(n):
            dst[i] = _sigmoid(src[i])
    return out


def quantile_head(const double[:, ::1] pre, const double[::1] base, double scale):
    cdef Py_ssize_t n = pre.shape[0], k = pre.shape[1], i, j
    gaps_arr = np.empty((n, k), dtype=np.float64)
    q_arr = np.empty((n, k), dtype=np.float64)
    cdef double[:, ::1] gaps = gaps_arr
    cdef double[:, ::1] q = q_arr
    cdef double acc
    with nogil:
        for i in range(n):
            acc = 0.0
            for j in range(k):
                gaps[i, j] = scale * _softplus(pre[i, j])
                acc = acc + gaps[i, j]
                q[i, j] = base[i] + acc
    return gaps_arr, q_arr


def quantile_head_backward(const double[:, ::1] pre, const double[:, ::1] dq, double scale):
    cdef Py_ssize_t n = pre.shape[0], k = pre.shape[1], i, j
    dpre_arr = np.empty((n, k), dtype=np.float64)
    dbase_arr = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] dpre = dpre_arr
    cdef double[::1] dbase = dbase_arr
    cdef double acc
    with nogil:
        for i in range(n):
            acc = 0.0
            for j in range(k - 1, -1, -1):
                acc = acc + dq[i, j]
                dpre[i, j] = scale * _sigmoid(pre[i, j]) * acc
            dbase[i] = acc
    return dpre_arr, dbase_arr


def pinball(const double[::1] y, const double[:, ::1] q, const double[::1] taus):
    cdef Py_ssize_t n = q.shape[0], k = q.shape[1], i, j
    grad_arr = np.empty((n, k), dtype=np.float64)
    cdef double[:, ::1] grad = grad_arr
    cdef double norm = 1.0 / (n * k)
    cdef double total = 0.0, row, u, t
    with nogil:
        for i in range(n):
            row = 0.0
            for j in range(k):
                u = y[i] - q[i, j]
                t = taus[j]
                if u > 0:
                    row = row + t * u
                    grad[i, j] = -t * norm
                else:
                    row = row + (t - 1.0) * u
                    grad[i, j] = (1.0 - t) * norm
            total = total + row
    return total / (n * k), grad_arr


def mixture_pdf_cdf(const double[:, ::1] centers, const double[::1] b, const double[:, ::1] y):
    cdef Py_ssize_t n = centers.shape[0], k = centers.shape[1], m = y.shape[1]
    cdef Py_ssize_t i, j, c
    pdf_arr = np.empty((n, m), dtype=np.float64)
    cdf_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] pdf = pdf_arr
    cdef double[:, ::1] cdf = cdf_arr
    cdef double z, sp, sc, inv_b
    with nogil:
        for i in range(n):
            inv_b = 1.0 / b[i]
            for j in range(m):
                sp = 0.0
                sc = 0.0
                for c in range(k):
                    z = (y[i, j] - centers[i, c]) * inv_b
                    sp = sp + INV_SQRT_2PI * exp(-0.5 * z * z)
                    sc = sc + 0.5 * erfc(-z * INV_SQRT_2)
                pdf[i, j] = sp / (b[i] * k)
                cdf[i, j] = sc / k
    return pdf_arr, cdf_arr
