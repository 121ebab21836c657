# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: ragged max-pooling and exhaustive kNN mean distances."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def segment_max(const double[:, ::1] values, const cnp.int64_t[::1] offsets):
    """Column-wise max of each row segment ``values[offsets[b]:offsets[b+1]]``.

    Returns ``(out, rows)``; ``rows[b, d]`` is the global row index of the first
    maximal entry, so ties resolve toward the lowest row.
    """
    cdef Py_ssize_t n_seg = offsets.shape[0] - 1
    cdef Py_ssize_t dim = values.shape[1]
    cdef Py_ssize_t b, r, d, start, stop
    cdef double v
    out_arr = np.empty((n_seg, dim), dtype=np.float64)
    rows_arr = np.empty((n_seg, dim), dtype=np.int64)
    cdef double[:, ::1] out = out_arr
    cdef cnp.int64_t[:, ::1] rows = rows_arr
    for b in range(n_seg):
        start = offsets[b]
        stop = offsets[b + 1]
        if stop <= start:
            raise ValueError("empty segment")
        for d in range(dim):
            out[b, d] = values[start, d]
            rows[b, d] = start
        for r in range(start + 1, stop):
            for d in range(dim):
                v = values[r, d]
                if v > out[b, d]:
                    out[b, d] = v
                    rows[b, d] = r
    return out_arr, rows_arr


def knn_mean_distance(const double[:, ::1] points, Py_ssize_t k):
    """Mean Euclidean distance from each point to its ``k`` nearest other points."""
    cdef Py_ssize_t n = points.shape[0]
    cdef Py_ssize_t i, j, m, pos
    cdef double dx, dy, dz, dist, acc
    if k < 1 or k > n - 1:
        raise ValueError(f"k must be in [1, {n - 1}], got {k}")
    best_arr = np.empty(k, dtype=np.float64)
    cdef double[::1] best = best_arr
    result_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] result = result_arr
    for i in range(n):
        m = 0
        for j in range(n):
            if j == i:
                continue
            dx = points[i, 0] - points[j, 0]
            dy = points[i, 1] - points[j, 1]
            dz = points[i, 2] - points[j, 2]
            dist = sqrt(dx * dx + dy * dy + dz * dz)
            if m < k:
                pos = m
                m += 1
            elif dist < best[k - 1]:
                pos = k - 1
            else:
                continue
            # insertion into the sorted prefix
            while pos > 0 and best[pos - 1] > dist:
                best[pos] = best[pos - 1]
                pos -= 1
            best[pos] = dist
        acc = 0.0
        for m in range(k):
            acc += best[m]
        result[i] = acc / k
    return result_arr
