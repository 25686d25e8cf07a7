# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: fused feature-row assembly and inversion counting.

Outputs are bit-identical to the numpy/Python fallbacks in polos.kernels;
the gain is avoiding temporaries and per-row Python overhead.
"""

from libc.math cimport fabs

import numpy as np

cimport numpy as cnp

cnp.import_array()


cdef inline Py_ssize_t _write_pair(double[:, ::1] out, Py_ssize_t row, Py_ssize_t col,
                                   const double[:] c, const double[:] r, bint full) noexcept nogil:
    cdef Py_ssize_t d = c.shape[0]
    cdef Py_ssize_t k
    for k in range(d):
        out[row, col + k] = c[k]
    for k in range(d):
        out[row, col + d + k] = r[k]
    if full:
        for k in range(d):
            out[row, col + 2 * d + k] = fabs(c[k] - r[k])
        for k in range(d):
            out[row, col + 3 * d + k] = c[k] * r[k]
        return col + 4 * d
    return col + 2 * d


cdef inline Py_ssize_t _write_ref_part(double[:, ::1] out, Py_ssize_t row, Py_ssize_t col,
                                       const double[:] c, const double[:] r, bint full) noexcept nogil:
    # reference-dependent columns only: [r] or [r; |c - r|; c * r]
    cdef Py_ssize_t d = c.shape[0]
    cdef Py_ssize_t k
    for k in range(d):
        out[row, col + k] = r[k]
    if full:
        for k in range(d):
            out[row, col + d + k] = fabs(c[k] - r[k])
        for k in range(d):
            out[row, col + 2 * d + k] = c[k] * r[k]
        return col + 3 * d
    return col + d


def assemble_unique(double[:, ::1] cand_clip, double[:, ::1] cand_rb,
                    double[:, ::1] refs_clip, double[:, ::1] refs_rb,
                    long long[::1] row_sample,
                    bint use_clip_text, bint use_roberta, bint full):
    """Per-reference feature columns (the sample-constant columns excluded)."""
    cdef Py_ssize_t n_rows = row_sample.shape[0]
    cdef Py_ssize_t dc = cand_clip.shape[1]
    cdef Py_ssize_t dr = cand_rb.shape[1]
    cdef Py_ssize_t per = 3 if full else 1
    cdef Py_ssize_t width = (per * dc if use_clip_text else 0) + (per * dr if use_roberta else 0)
    out_arr = np.empty((n_rows, width), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t row, s, col
    with nogil:
        for row in range(n_rows):
            s = <Py_ssize_t> row_sample[row]
            col = 0
            if use_clip_text:
                col = _write_ref_part(out, row, col, cand_clip[s], refs_clip[row], full)
            if use_roberta:
                col = _write_ref_part(out, row, col, cand_rb[s], refs_rb[row], full)
    return out_arr


def assemble_rows(double[:, ::1] cand_clip, double[:, ::1] cand_rb, double[:, ::1] img,
                  double[:, ::1] refs_clip, double[:, ::1] refs_rb,
                  long long[::1] row_sample,
                  bint use_clip_text, bint use_image, bint use_roberta, bint full):
    """Complete fused feature rows, one per (sample, reference)."""
    cdef Py_ssize_t n_rows = row_sample.shape[0]
    cdef Py_ssize_t dc = cand_clip.shape[1]
    cdef Py_ssize_t dr = cand_rb.shape[1]
    cdef Py_ssize_t factor = 4 if full else 2
    cdef Py_ssize_t width = 0
    if use_clip_text:
        width += factor * dc
    if use_image:
        width += factor * dc
    if use_roberta:
        width += factor * dr
    out_arr = np.empty((n_rows, width), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t row, s, col
    with nogil:
        for row in range(n_rows):
            s = <Py_ssize_t> row_sample[row]
            col = 0
            if use_clip_text:
                col = _write_pair(out, row, col, cand_clip[s], refs_clip[row], full)
            if use_image:
                col = _write_pair(out, row, col, cand_clip[s], img[s], full)
            if use_roberta:
                col = _write_pair(out, row, col, cand_rb[s], refs_rb[row], full)
    return out_arr


def count_inversions(double[::1] values):
    """Pairs (i, j) with i < j and values[i] > values[j], by mergesort."""
    cdef Py_ssize_t n = values.shape[0]
    arr_np = np.array(values, dtype=np.float64, copy=True)
    buf_np = np.empty(n, dtype=np.float64)
    cdef double[::1] arr = arr_np
    cdef double[::1] buf = buf_np
    cdef double[::1] tmp
    cdef long long inversions = 0
    cdef Py_ssize_t width = 1, lo, mid, hi, i, j, k
    with nogil:
        while width < n:
            lo = 0
            while lo < n:
                mid = lo + width
                if mid > n:
                    mid = n
                hi = lo + 2 * width
                if hi > n:
                    hi = n
                i = lo
                j = mid
                k = lo
                while i < mid and j < hi:
                    if arr[j] < arr[i]:
                        buf[k] = arr[j]
                        j += 1
                        inversions += mid - i
                    else:
                        buf[k] = arr[i]
                        i += 1
                    k += 1
                while i < mid:
                    buf[k] = arr[i]
                    i += 1
                    k += 1
                while j < hi:
                    buf[k] = arr[j]
                    j += 1
                    k += 1
                lo += 2 * width
            tmp = arr
            arr = buf
            buf = tmp
            width *= 2
    return inversions
