"""Compiled reduction kernels.

Every kernel accumulates in plain sequential index order with one rounding per
multiply and one per add, so the output is bit-identical to the numpy loops in
``_fallback.py``.
"""
import numpy as np

ctypedef fused real:
    float
    double


def matmul(real[:, ::1] a, real[:, ::1] b):
    cdef Py_ssize_t m = a.shape[0]
    cdef Py_ssize_t k = a.shape[1]
    cdef Py_ssize_t n = b.shape[1]
    cdef Py_ssize_t i, p, j
    cdef real aip, prod
    if b.shape[0] != k:
        raise ValueError(f"inner dimensions differ: {k} vs {b.shape[0]}")
    out = np.zeros((m, n), dtype=np.float32 if real is float else np.float64)
    cdef real[:, ::1] c = out
    with nogil:
        for i in range(m):
            for p in range(k):
                aip = a[i, p]
                for j in range(n):
                    prod = aip * b[p, j]
                    c[i, j] = c[i, j] + prod
    return out


def row_sum(real[:, ::1] x):
    cdef Py_ssize_t m = x.shape[0]
    cdef Py_ssize_t n = x.shape[1]
    cdef Py_ssize_t i, j
    cdef real acc
    out = np.zeros(m, dtype=np.float32 if real is float else np.float64)
    cdef real[::1] o = out
    with nogil:
        for i in range(m):
            acc = 0
            for j in range(n):
                acc = acc + x[i, j]
            o[i] = acc
    return out


def col_sum(real[:, ::1] x):
    cdef Py_ssize_t m = x.shape[0]
    cdef Py_ssize_t n = x.shape[1]
    cdef Py_ssize_t i, j
    out = np.zeros(n, dtype=np.float32 if real is float else np.float64)
    cdef real[::1] o = out
    with nogil:
        for i in range(m):
            for j in range(n):
                o[j] = o[j] + x[i, j]
    return out
