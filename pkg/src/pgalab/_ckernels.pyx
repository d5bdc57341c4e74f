# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels. Mirrors ``_pykernels``; selected by ``pgalab.kernels``."""
import numpy as np
from libc.math cimport exp, log, fabs, INFINITY


def lu_logabsdet(double[:, :, ::1] mats, double tol):
    cdef Py_ssize_t nb = mats.shape[0], n = mats.shape[1]
    cdef Py_ssize_t b, i, j, k, piv
    cdef double scale, best, v, pivot, l, acc
    work_arr = np.array(mats, dtype=np.float64, copy=True)
    cdef double[:, :, ::1] a = work_arr
    out_arr = np.empty(nb, dtype=np.float64)
    sing_arr = np.zeros(nb, dtype=np.bool_)
    cdef double[::1] out = out_arr
    cdef unsigned char[::1] sing = sing_arr.view(np.uint8)
    with nogil:
        for b in range(nb):
            scale = 0.0
            for i in range(n):
                for j in range(n):
                    v = fabs(a[b, i, j])
                    if v > scale:
                        scale = v
            acc = 0.0
            if scale == 0.0:
                sing[b] = 1
                out[b] = -INFINITY
                continue
            for k in range(n):
                piv = k
                best = fabs(a[b, k, k])
                for i in range(k + 1, n):
                    v = fabs(a[b, i, k])
                    if v > best:
                        best = v
                        piv = i
                if best <= tol * scale:
                    sing[b] = 1
                    break
                if piv != k:
                    for j in range(n):
                        v = a[b, k, j]
                        a[b, k, j] = a[b, piv, j]
                        a[b, piv, j] = v
                pivot = a[b, k, k]
                acc = acc + log(fabs(pivot))
                for i in range(k + 1, n):
                    l = a[b, i, k] / pivot
                    for j in range(k + 1, n):
                        a[b, i, j] = a[b, i, j] - l * a[b, k, j]
            out[b] = -INFINITY if sing[b] else acc
    return out_arr, sing_arr


def pairwise_sq_dists(double[:, ::1] x, double[:, ::1] y):
    cdef Py_ssize_t n = x.shape[0], m = y.shape[0], d = x.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double acc, t
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    with nogil:
        for i in range(n):
            for j in range(m):
                acc = 0.0
                for k in range(d):
                    t = x[i, k] - y[j, k]
                    acc = acc + t * t
                out[i, j] = acc
    return out_arr


def gaussian_kernel(double[:, ::1] x, double[:, ::1] y, double[::1] bandwidths):
    cdef Py_ssize_t n = x.shape[0], m = y.shape[0], d = x.shape[1], nb = bandwidths.shape[0]
    cdef Py_ssize_t i, j, k, q
    cdef double acc, t, s
    coef_arr = np.empty(nb, dtype=np.float64)
    cdef double[::1] coef = coef_arr
    for q in range(nb):
        coef[q] = -0.5 / (bandwidths[q] * bandwidths[q])
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    with nogil:
        for i in range(n):
            for j in range(m):
                acc = 0.0
                for k in range(d):
                    t = x[i, k] - y[j, k]
                    acc = acc + t * t
                s = 0.0
                for q in range(nb):
                    s = s + exp(coef[q] * acc)
                out[i, j] = s
    return out_arr


def momentum_update(double[::1] p, double[::1] v, double[::1] g, double lr, double momentum):
    cdef Py_ssize_t i, n = p.shape[0]
    with nogil:
        for i in range(n):
            v[i] = momentum * v[i] + g[i]
            p[i] = p[i] - lr * v[i]
