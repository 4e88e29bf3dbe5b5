# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernels: block log-mass statistics and the fused online-softmax
attend loop.  Mirrors ``certkv._kernels.pure``; see that module for the
accumulation contract."""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, expf, log, INFINITY

cnp.import_array()

NAME = "compiled"


def block_logmass(scores_in, bounds_in):
    """Per-block max, exp-sum and log-mass (float64), block-max stabilised."""
    cdef cnp.ndarray[cnp.float64_t, ndim=1] scores = np.ascontiguousarray(
        scores_in, dtype=np.float64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] bounds = np.ascontiguousarray(
        bounds_in, dtype=np.int64)
    cdef Py_ssize_t nb = bounds.shape[0] - 1
    if nb <= 0:
        empty = np.empty(0, dtype=np.float64)
        return empty, empty.copy(), empty.copy()
    cdef cnp.ndarray[cnp.float64_t, ndim=1] block_max = np.empty(nb, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] block_sum = np.empty(nb, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] log_mass = np.empty(nb, dtype=np.float64)
    cdef Py_ssize_t i, t, lo, hi
    cdef double m, s
    for i in range(nb):
        lo = bounds[i]
        hi = bounds[i + 1]
        m = -INFINITY
        for t in range(lo, hi):
            if scores[t] > m:
                m = scores[t]
        s = 0.0
        for t in range(lo, hi):
            s += exp(scores[t] - m)
        block_max[i] = m
        block_sum[i] = s
        log_mass[i] = m + log(s)
    return block_max, block_sum, log_mass


def fused_attend(scores_in, values_in, bounds_in):
    """Single-pass online-softmax attend with float32 (m, l, o) state."""
    cdef cnp.ndarray[cnp.float32_t, ndim=1] scores = np.ascontiguousarray(
        scores_in, dtype=np.float32)
    cdef cnp.ndarray[cnp.float32_t, ndim=2] values = np.ascontiguousarray(
        values_in, dtype=np.float32)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] bounds = np.ascontiguousarray(
        bounds_in, dtype=np.int64)
    cdef Py_ssize_t nb = bounds.shape[0] - 1
    cdef Py_ssize_t d = values.shape[1]
    cdef cnp.ndarray[cnp.float32_t, ndim=1] o = np.zeros(d, dtype=np.float32)
    cdef cnp.ndarray[cnp.float32_t, ndim=1] out = np.empty(d, dtype=np.float32)
    cdef float m = -INFINITY
    cdef float l = 0.0
    cdef float m_new, scale, p, w
    cdef Py_ssize_t i, t, c, lo, hi
    for i in range(nb):
        lo = bounds[i]
        hi = bounds[i + 1]
        m_new = m
        for t in range(lo, hi):
            if scores[t] > m_new:
                m_new = scores[t]
        scale = expf(m - m_new)
        for c in range(d):
            o[c] = o[c] * scale
        w = 0.0
        for t in range(lo, hi):
            p = expf(scores[t] - m_new)
            w += p
            for c in range(d):
                o[c] = o[c] + p * values[t, c]
        l = l * scale + w
        m = m_new
    for c in range(d):
        out[c] = o[c] / l
    return out, np.float32(m), np.float32(l)
