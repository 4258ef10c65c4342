# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY, exp, sqrt

cnp.import_array()


def segment_sum(values, segment_of, Py_ssize_t n_segments):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] v
    cdef cnp.int64_t[::1] seg = np.ascontiguousarray(segment_of, dtype=np.int64)
    arr = np.ascontiguousarray(values, dtype=np.float64)
    tail = arr.shape[1:]
    v = arr.reshape(arr.shape[0], int(np.prod(tail)))
    cdef Py_ssize_t e, j, s, m = v.shape[0], d = v.shape[1]
    out = np.zeros((n_segments, d), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double[:, ::1] vv = v
    for e in range(m):
        s = seg[e]
        if s < 0 or s >= n_segments:
            raise IndexError(f"segment id {s} out of range [0, {n_segments})")
        for j in range(d):
            o[s, j] += vv[e, j]
    return out.reshape((n_segments,) + tail)


def segment_max(values, segment_of, Py_ssize_t n_segments):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] v
    cdef cnp.int64_t[::1] seg = np.ascontiguousarray(segment_of, dtype=np.int64)
    arr = np.ascontiguousarray(values, dtype=np.float64)
    tail = arr.shape[1:]
    v = arr.reshape(arr.shape[0], int(np.prod(tail)))
    cdef Py_ssize_t e, j, s, m = v.shape[0], d = v.shape[1]
    out = np.full((n_segments, d), -INFINITY, dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double[:, ::1] vv = v
    for e in range(m):
        s = seg[e]
        if s < 0 or s >= n_segments:
            raise IndexError(f"segment id {s} out of range [0, {n_segments})")
        for j in range(d):
            if vv[e, j] > o[s, j]:
                o[s, j] = vv[e, j]
    for s in range(n_segments):
        for j in range(d):
            if o[s, j] == -INFINITY:
                o[s, j] = 0.0
    return out.reshape((n_segments,) + tail)


def knn(points, Py_ssize_t k, chunk=None):
    cdef double[:, ::1] p = np.ascontiguousarray(points, dtype=np.float64)
    cdef Py_ssize_t n = p.shape[0], dim = p.shape[1]
    out = np.empty((n, k), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] o = out
    best_d_arr = np.empty(k, dtype=np.float64)
    best_i_arr = np.empty(k, dtype=np.int64)
    cdef double[::1] bd = best_d_arr
    cdef cnp.int64_t[::1] bi = best_i_arr
    cdef Py_ssize_t i, j, a, pos, filled
    cdef double d2, diff
    for i in range(n):
        filled = 0
        for j in range(n):
            if j == i:
                continue
            d2 = 0.0
            for a in range(dim):
                diff = p[i, a] - p[j, a]
                d2 += diff * diff
            # j is visited in increasing order, so strict < keeps the lower index on ties
            if filled == k and not (d2 < bd[k - 1]):
                continue
            pos = filled if filled < k else k - 1
            while pos > 0 and d2 < bd[pos - 1]:
                if pos < k:
                    bd[pos] = bd[pos - 1]
                    bi[pos] = bi[pos - 1]
                pos -= 1
            bd[pos] = d2
            bi[pos] = j
            if filled < k:
                filled += 1
        for a in range(k):
            o[i, a] = bi[a]
    return out


def attention_forward(q, k, v, etab, etype, src, dst, Py_ssize_t n_heads):
    cdef double[:, ::1] Q = np.ascontiguousarray(q, dtype=np.float64)
    cdef double[:, ::1] K = np.ascontiguousarray(k, dtype=np.float64)
    cdef double[:, ::1] V = np.ascontiguousarray(v, dtype=np.float64)
    cdef double[:, ::1] T = np.ascontiguousarray(etab, dtype=np.float64)
    cdef cnp.int64_t[::1] ET = np.ascontiguousarray(etype, dtype=np.int64)
    cdef cnp.int64_t[::1] S = np.ascontiguousarray(src, dtype=np.int64)
    cdef cnp.int64_t[::1] D = np.ascontiguousarray(dst, dtype=np.int64)
    cdef Py_ssize_t n = Q.shape[0], d = Q.shape[1], m = S.shape[0], nt = T.shape[0]
    cdef Py_ssize_t dh = d // n_heads
    cdef double scale = 1.0 / sqrt(<double>dh)
    alpha_arr = np.empty((m, n_heads), dtype=np.float64)
    mx_arr = np.full((n, n_heads), -INFINITY, dtype=np.float64)
    tot_arr = np.zeros((n, n_heads), dtype=np.float64)
    out_arr = np.zeros((n, d), dtype=np.float64)
    cdef double[:, ::1] A = alpha_arr
    cdef double[:, ::1] MX = mx_arr
    cdef double[:, ::1] TOT = tot_arr
    cdef double[:, ::1] O = out_arr
    cdef Py_ssize_t a, h, c, i, j, t, col
    cdef double acc
    for a in range(m):
        i = D[a]
        j = S[a]
        t = ET[a]
        if i < 0 or i >= n or j < 0 or j >= n or t < 0 or t >= nt:
            raise IndexError("edge endpoint or edge type out of range")
        for h in range(n_heads):
            acc = 0.0
            for c in range(dh):
                col = h * dh + c
                acc += Q[i, col] * (K[j, col] + T[t, col])
            acc *= scale
            A[a, h] = acc
            if acc > MX[i, h]:
                MX[i, h] = acc
    for a in range(m):
        i = D[a]
        for h in range(n_heads):
            A[a, h] = exp(A[a, h] - MX[i, h])
            TOT[i, h] += A[a, h]
    for a in range(m):
        i = D[a]
        j = S[a]
        t = ET[a]
        for h in range(n_heads):
            A[a, h] /= TOT[i, h]
            for c in range(dh):
                col = h * dh + c
                O[i, col] += A[a, h] * (V[j, col] + T[t, col])
    return out_arr, alpha_arr


def attention_backward(g, q, k, v, etab, etype, alpha, src, dst, Py_ssize_t n_heads):
    cdef double[:, ::1] G = np.ascontiguousarray(g, dtype=np.float64)
    cdef double[:, ::1] Q = np.ascontiguousarray(q, dtype=np.float64)
    cdef double[:, ::1] K = np.ascontiguousarray(k, dtype=np.float64)
    cdef double[:, ::1] V = np.ascontiguousarray(v, dtype=np.float64)
    cdef double[:, ::1] T = np.ascontiguousarray(etab, dtype=np.float64)
    cdef cnp.int64_t[::1] ET = np.ascontiguousarray(etype, dtype=np.int64)
    cdef double[:, ::1] A = np.ascontiguousarray(alpha, dtype=np.float64)
    cdef cnp.int64_t[::1] S = np.ascontiguousarray(src, dtype=np.int64)
    cdef cnp.int64_t[::1] D = np.ascontiguousarray(dst, dtype=np.int64)
    cdef Py_ssize_t n = Q.shape[0], d = Q.shape[1], m = S.shape[0], nt = T.shape[0]
    cdef Py_ssize_t dh = d // n_heads
    cdef double scale = 1.0 / sqrt(<double>dh)
    dq_arr = np.zeros((n, d))
    dk_arr = np.zeros((n, d))
    dv_arr = np.zeros((n, d))
    dt_arr = np.zeros((nt, d))
    dalpha_arr = np.empty((m, n_heads))
    dot_arr = np.zeros((n, n_heads))
    cdef double[:, ::1] DQ = dq_arr
    cdef double[:, ::1] DK = dk_arr
    cdef double[:, ::1] DV = dv_arr
    cdef double[:, ::1] DT = dt_arr
    cdef double[:, ::1] DA = dalpha_arr
    cdef double[:, ::1] DOT = dot_arr
    cdef Py_ssize_t a, h, c, i, j, t, col
    cdef double acc, dl, w
    for a in range(m):
        i = D[a]
        j = S[a]
        t = ET[a]
        for h in range(n_heads):
            acc = 0.0
            for c in range(dh):
                col = h * dh + c
                acc += G[i, col] * (V[j, col] + T[t, col])
                w = A[a, h] * G[i, col]
                DV[j, col] += w
                DT[t, col] += w
            DA[a, h] = acc
            DOT[i, h] += A[a, h] * acc
    for a in range(m):
        i = D[a]
        j = S[a]
        t = ET[a]
        for h in range(n_heads):
            dl = A[a, h] * (DA[a, h] - DOT[i, h]) * scale
            for c in range(dh):
                col = h * dh + c
                DQ[i, col] += dl * (K[j, col] + T[t, col])
                w = dl * Q[i, col]
                DK[j, col] += w
                DT[t, col] += w
    return dq_arr, dk_arr, dv_arr, dt_arr
