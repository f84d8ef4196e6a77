# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled first-order linear recurrences.

Both routines work on (steps, modes, columns) arrays; the per-step factor
``a`` is shared by every column of a mode.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def recur_forward(const double[:, ::1] a, const double[:, :, ::1] x,
                  const double[:, ::1] y0):
    """y[0] = y0, y[i+1] = a[i] * y[i] + x[i]."""
    cdef Py_ssize_t n = a.shape[0], m = a.shape[1], q = x.shape[2]
    cdef Py_ssize_t i, j, k
    out = np.empty((n + 1, m, q), dtype=np.float64)
    cdef double[:, :, ::1] y = out
    cdef double c
    for j in range(m):
        for k in range(q):
            y[0, j, k] = y0[j, k]
    for i in range(n):
        for j in range(m):
            c = a[i, j]
            for k in range(q):
                y[i + 1, j, k] = c * y[i, j, k] + x[i, j, k]
    return out


def recur_backward(const double[:, ::1] a, const double[:, :, ::1] x,
                   const double[:, ::1] yn):
    """y[n] = yn, y[i] = a[i] * y[i+1] + x[i]."""
    cdef Py_ssize_t n = a.shape[0], m = a.shape[1], q = x.shape[2]
    cdef Py_ssize_t i, j, k
    out = np.empty((n + 1, m, q), dtype=np.float64)
    cdef double[:, :, ::1] y = out
    cdef double c
    for j in range(m):
        for k in range(q):
            y[n, j, k] = yn[j, k]
    for i in range(n - 1, -1, -1):
        for j in range(m):
            c = a[i, j]
            for k in range(q):
                y[i, j, k] = c * y[i + 1, j, k] + x[i, j, k]
    return out
