# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint64_t

cnp.import_array()


def fnv1a64(const unsigned char[:] data):
    cdef uint64_t h = 0xCBF29CE484222325ULL
    cdef Py_ssize_t i
    for i in range(data.shape[0]):
        h ^= data[i]
        h *= 0x100000001B3ULL
    return int(h)


def bspline_basis(x, knots, int order):
    cdef double[:] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:] t = np.ascontiguousarray(knots, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0]
    cdef Py_ssize_t nk = t.shape[0]
    cdef Py_ssize_t nb = nk - order - 1
    out = np.zeros((n, nb), dtype=np.float64)
    dout = np.zeros((n, nb), dtype=np.float64)
    cdef double[:, :] B = out
    cdef double[:, :] D = dout
    cdef double[:] work = np.zeros(nk, dtype=np.float64)
    cdef double[:] prev = np.zeros(nk, dtype=np.float64)
    cdef Py_ssize_t p, i, k
    cdef double xp, ld, rd, a, b
    for p in range(n):
        xp = xv[p]
        for i in range(nk - 1):
            work[i] = 1.0 if (xp >= t[i] and xp < t[i + 1]) else 0.0
        for k in range(1, order + 1):
            # keep the degree k-1 values for the derivative
            for i in range(nk - k):
                prev[i] = work[i]
            for i in range(nk - 1 - k):
                ld = t[i + k] - t[i]
                rd = t[i + k + 1] - t[i + 1]
                a = (xp - t[i]) / ld if ld > 0 else 0.0
                b = (t[i + k + 1] - xp) / rd if rd > 0 else 0.0
                work[i] = a * prev[i] + b * prev[i + 1]
        for i in range(nb):
            B[p, i] = work[i]
        if order > 0:
            for i in range(nb):
                ld = t[i + order] - t[i]
                rd = t[i + order + 1] - t[i + 1]
                a = order / ld if ld > 0 else 0.0
                b = order / rd if rd > 0 else 0.0
                D[p, i] = a * prev[i] - b * prev[i + 1]
    return out, dout
