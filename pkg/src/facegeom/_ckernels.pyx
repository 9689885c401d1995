# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops; see ``_pykernels`` for the reference semantics."""
import numpy as np
cimport cython
from cython.parallel cimport prange
from libc.math cimport exp, fabs, sqrt


def detail_displacement(const double[:, ::1] vertices, const double[:, ::1] normals,
                        const double[::1] mu, const long long[::1] indptr,
                        const long long[::1] indices, int num_threads=0):
    cdef Py_ssize_t n = vertices.shape[0]
    out_arr = np.zeros(n)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t v, e, i
    cdef double dx, dy, dz, length, proj, a, num, den
    if num_threads <= 0:
        num_threads = 1
    for v in prange(n, nogil=True, num_threads=num_threads, schedule="static"):
        num = 0.0
        den = 0.0
        for e in range(indptr[v], indptr[v + 1]):
            i = indices[e]
            dx = vertices[v, 0] - vertices[i, 0]
            dy = vertices[v, 1] - vertices[i, 1]
            dz = vertices[v, 2] - vertices[i, 2]
            length = sqrt(dx * dx + dy * dy + dz * dz)
            proj = fabs(dx * normals[v, 0] + dy * normals[v, 1] + dz * normals[v, 2])
            a = exp(-length)
            num = num + a * (mu[v] - mu[i]) * (1.0 - proj / length)
            den = den + a
        if indptr[v + 1] > indptr[v]:
            out[v] = num / den
    return out_arr


def affine_consensus(const double[:, ::1] src, const double[:, ::1] dst,
                     const double[:, :, ::1] models, double threshold, int num_threads=0):
    cdef Py_ssize_t k = models.shape[0]
    cdef Py_ssize_t n = src.shape[0]
    counts_arr = np.zeros(k, dtype=np.int64)
    sse_arr = np.zeros(k)
    cdef long long[::1] counts = counts_arr
    cdef double[::1] sse = sse_arr
    cdef double thr2 = threshold * threshold
    cdef Py_ssize_t m, p
    cdef double rx, ry, rz, r2, acc
    cdef long long cnt
    if num_threads <= 0:
        num_threads = 1
    for m in prange(k, nogil=True, num_threads=num_threads, schedule="static"):
        cnt = 0
        acc = 0.0
        for p in range(n):
            rx = (models[m, 0, 0] * src[p, 0] + models[m, 0, 1] * src[p, 1]
                  + models[m, 0, 2] * src[p, 2] + models[m, 0, 3] - dst[p, 0])
            ry = (models[m, 1, 0] * src[p, 0] + models[m, 1, 1] * src[p, 1]
                  + models[m, 1, 2] * src[p, 2] + models[m, 1, 3] - dst[p, 1])
            rz = (models[m, 2, 0] * src[p, 0] + models[m, 2, 1] * src[p, 1]
                  + models[m, 2, 2] * src[p, 2] + models[m, 2, 3] - dst[p, 2])
            r2 = rx * rx + ry * ry + rz * rz
            if r2 <= thr2:
                cnt = cnt + 1
                acc = acc + r2
        counts[m] = cnt
        sse[m] = acc
    return counts_arr, sse_arr


def line_consensus(const double[::1] est, const double[::1] gt,
                   const double[:, ::1] models, double threshold, int num_threads=0):
    cdef Py_ssize_t k = models.shape[0]
    cdef Py_ssize_t n = est.shape[0]
    counts_arr = np.zeros(k, dtype=np.int64)
    sse_arr = np.zeros(k)
    cdef long long[::1] counts = counts_arr
    cdef double[::1] sse = sse_arr
    cdef Py_ssize_t m, p
    cdef double r, acc
    cdef long long cnt
    if num_threads <= 0:
        num_threads = 1
    for m in prange(k, nogil=True, num_threads=num_threads, schedule="static"):
        cnt = 0
        acc = 0.0
        for p in range(n):
            r = fabs((est[p] - models[m, 1]) / models[m, 0] - gt[p])
            if r <= threshold:
                cnt = cnt + 1
                acc = acc + r * r
        counts[m] = cnt
        sse[m] = acc
    return counts_arr, sse_arr
