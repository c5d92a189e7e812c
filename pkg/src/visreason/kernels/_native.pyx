# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels; bit-identical to visreason.kernels._pure."""

import numpy as np

cimport numpy as cnp
from libc.math cimport fabs, floor

cnp.import_array()


def alpha_blend(dst, src, double alpha):
    cdef cnp.ndarray[cnp.uint8_t, ndim=3] d = np.ascontiguousarray(dst)
    cdef cnp.ndarray[cnp.uint8_t, ndim=3] s = np.ascontiguousarray(src)
    cdef Py_ssize_t h = d.shape[0], w = d.shape[1], c = d.shape[2]
    cdef cnp.ndarray[cnp.uint8_t, ndim=3] out = np.empty((h, w, c), dtype=np.uint8)
    cdef Py_ssize_t y, x, k
    cdef double v
    for y in range(h):
        for x in range(w):
            for k in range(c):
                v = floor((<double> d[y, x, k]) * (1.0 - alpha) + (<double> s[y, x, k]) * alpha + 0.5)
                out[y, x, k] = <cnp.uint8_t> v
    return out


def zoom_nearest(src, Py_ssize_t out_h, Py_ssize_t out_w, double factor):
    cdef cnp.ndarray[cnp.uint8_t, ndim=3] s = np.ascontiguousarray(src)
    cdef Py_ssize_t in_h = s.shape[0], in_w = s.shape[1], c = s.shape[2]
    cdef cnp.ndarray[cnp.uint8_t, ndim=3] out = np.empty((out_h, out_w, c), dtype=np.uint8)
    cdef Py_ssize_t y, x, k, sy, sx
    for y in range(out_h):
        sy = <Py_ssize_t> ((<double> y) / factor)
        if sy > in_h - 1:
            sy = in_h - 1
        for x in range(out_w):
            sx = <Py_ssize_t> ((<double> x) / factor)
            if sx > in_w - 1:
                sx = in_w - 1
            for k in range(c):
                out[y, x, k] = s[sy, sx, k]
    return out


def simulate_chain(plan_cum, act_cum, plan_ratio, act_ratio, next_state, Py_ssize_t start,
                   double eps, Py_ssize_t cap, uniforms):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] pc = np.ascontiguousarray(plan_cum)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] ac = np.ascontiguousarray(act_cum)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] pr = np.ascontiguousarray(plan_ratio)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] ar = np.ascontiguousarray(act_ratio)
    cdef cnp.ndarray[cnp.int32_t, ndim=3] ns = np.ascontiguousarray(next_state, dtype=np.int32)
    cdef cnp.ndarray[cnp.float64_t, ndim=3] u = np.ascontiguousarray(uniforms)
    cdef Py_ssize_t n = u.shape[0]
    cdef Py_ssize_t nvocab = pc.shape[1]
    cdef cnp.ndarray[cnp.int32_t, ndim=1] steps = np.zeros(n, dtype=np.int32)
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] stopped = np.zeros(n, dtype=np.uint8)
    cdef Py_ssize_t i, h, s, t, a
    cdef double ratio, uv
    for i in range(n):
        s = start
        for h in range(cap):
            uv = u[i, h, 0]
            t = 0
            while t < nvocab - 1 and pc[s, t] <= uv:
                t += 1
            uv = u[i, h, 1]
            a = 0
            while a < nvocab - 1 and ac[t, a] <= uv:
                a += 1
            ratio = pr[s, t] + ar[t, a]
            steps[i] = <cnp.int32_t> (h + 1)
            if fabs(ratio) < eps:
                stopped[i] = 1
                break
            s = ns[s, t, a]
    return steps, stopped
