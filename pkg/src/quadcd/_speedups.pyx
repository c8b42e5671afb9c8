# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for the per-token distribution math.

Single fused passes over the vocabulary; the numpy module `_kernels_py`
implements the identical formulas and is used when this extension is not
built (or when QUADCD_PURE_PYTHON is set).
"""

from libc.math cimport exp, log, INFINITY

import numpy as np

BACKEND = "cython"


def softmax(double[::1] logits):
    cdef Py_ssize_t n = logits.shape[0]
    cdef Py_ssize_t i
    cdef double hi = logits[0]
    for i in range(1, n):
        if logits[i] > hi:
            hi = logits[i]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] ov = out
    cdef double total = 0.0
    for i in range(n):
        ov[i] = exp(logits[i] - hi)
        total += ov[i]
    for i in range(n):
        ov[i] /= total
    return out


def kl_div(double[::1] p, double[::1] q) -> float:
    cdef Py_ssize_t n = p.shape[0]
    cdef Py_ssize_t i
    cdef double acc = 0.0
    for i in range(n):
        if p[i] > 0.0:
            if q[i] == 0.0:
                return INFINITY
            acc += p[i] * log(p[i] / q[i])
    return acc


def js_div(double[::1] p, double[::1] q) -> float:
    cdef Py_ssize_t n = p.shape[0]
    cdef Py_ssize_t i
    cdef double m
    cdef double kl_pm = 0.0
    cdef double kl_qm = 0.0
    for i in range(n):
        m = 0.5 * (p[i] + q[i])
        if p[i] > 0.0:
            kl_pm += p[i] * log(p[i] / m)
        if q[i] > 0.0:
            kl_qm += q[i] * log(q[i] / m)
    return 0.5 * kl_pm + 0.5 * kl_qm
