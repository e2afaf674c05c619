# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: per-row top-k selection and gather-based sparse attention.

Semantics match ``_kernels_py`` exactly; the test-suite checks both.
"""
import numpy as np

from libc.math cimport exp, sqrt

from .errors import DegenerateRowError


def topk_rows(const double[:, ::1] scores, const unsigned char[:, ::1] admissible,
              const long long[::1] kept):
    cdef Py_ssize_t rows = scores.shape[0]
    cdef Py_ssize_t cols = scores.shape[1]
    out = np.zeros((rows, cols), dtype=np.uint8)
    cdef unsigned char[:, ::1] o = out
    best_idx_arr = np.empty(max(cols, 1), dtype=np.intp)
    best_val_arr = np.empty(max(cols, 1), dtype=np.float64)
    cdef Py_ssize_t[::1] best_idx = best_idx_arr
    cdef double[::1] best_val = best_val_arr
    cdef Py_ssize_t r, j, t, n_adm, want, filled
    cdef double s
    for r in range(rows):
        n_adm = 0
        for j in range(cols):
            n_adm += admissible[r, j] != 0
        want = kept[r]
        if want >= n_adm:
            for j in range(cols):
                o[r, j] = admissible[r, j] != 0
            continue
        if want <= 0:
            continue
        # sorted (desc score, asc index) buffer of the current best entries
        filled = 0
        for j in range(cols):
            if not admissible[r, j]:
                continue
            s = scores[r, j]
            if filled == want and s <= best_val[filled - 1]:
                continue
            t = filled if filled < want else want - 1
            while t > 0 and best_val[t - 1] < s:
                best_val[t] = best_val[t - 1]
                best_idx[t] = best_idx[t - 1]
                t -= 1
            best_val[t] = s
            best_idx[t] = j
            if filled < want:
                filled += 1
        for t in range(filled):
            o[r, best_idx[t]] = 1
    return out


def sparse_attention(const double[:, :, ::1] q, const double[:, :, ::1] k,
                     const double[:, :, ::1] v, const unsigned char[:, :, ::1] mask,
                     int heads):
    cdef Py_ssize_t n_rows = q.shape[0]
    cdef Py_ssize_t n_q = q.shape[1]
    cdef Py_ssize_t dh = q.shape[2]
    cdef Py_ssize_t n_k = k.shape[1]
    cdef Py_ssize_t dv = v.shape[2]
    out_arr = np.zeros((n_rows, n_q, dv), dtype=np.float64)
    w_arr = np.zeros((n_rows, n_q, n_k), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef double[:, :, ::1] weights = w_arr
    idx_arr = np.empty(max(n_k, 1), dtype=np.intp)
    buf_arr = np.empty(max(n_k, 1), dtype=np.float64)
    cdef Py_ssize_t[::1] idx = idx_arr
    cdef double[::1] buf = buf_arr
    cdef double scale = 1.0 / sqrt(<double>dh)
    cdef Py_ssize_t r, g, i, j, t, c, m
    cdef long long total = 0
    cdef double dot, mx, denom, w
    cdef bint empty_row = False
    for r in range(n_rows):
        g = r // heads
        for i in range(n_q):
            m = 0
            for j in range(n_k):
                if mask[g, i, j]:
                    idx[m] = j
                    m += 1
            if m == 0:
                empty_row = True
                break
            mx = -1e308
            for t in range(m):
                j = idx[t]
                dot = 0.0
                for c in range(dh):
                    dot += q[r, i, c] * k[r, j, c]
                dot = dot * scale
                buf[t] = dot
                if dot > mx:
                    mx = dot
            denom = 0.0
            for t in range(m):
                buf[t] = exp(buf[t] - mx)
                denom += buf[t]
            for t in range(m):
                j = idx[t]
                w = buf[t] / denom
                weights[r, i, j] = w
                for c in range(dv):
                    out[r, i, c] += w * v[r, j, c]
            total += m
        if empty_row:
            break
    if empty_row:
        raise DegenerateRowError("sparse attention row with no kept position")
    return out_arr, w_arr, total
