"""Pure-numpy versions of the compiled kernels in ``_kernels.pyx``."""

import numpy as np


def segment_max(values, offsets):
    values = np.asarray(values, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.int64)
    lengths = np.diff(offsets)
    if np.any(lengths <= 0):
        raise ValueError("empty segment")
    n_seg, dim = len(lengths), values.shape[1]
    if n_seg and np.all(lengths == lengths[0]):
        blocks = values[offsets[0]:offsets[-1]].reshape(n_seg, lengths[0], dim)
        local = np.argmax(blocks, axis=1)
        out = np.take_along_axis(blocks, local[:, None, :], axis=1)[:, 0, :]
        return out, local + offsets[:-1, None]
    out = np.empty((n_seg, dim))
    rows = np.empty((n_seg, dim), dtype=np.int64)
    for b in range(n_seg):
        block = values[offsets[b]:offsets[b + 1]]
        local = np.argmax(block, axis=0)
        out[b] = block[local, np.arange(dim)]
        rows[b] = local + offsets[b]
    return out, rows


def knn_mean_distance(points, k):
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if k < 1 or k > n - 1:
        raise ValueError(f"k must be in [1, {n - 1}], got {k}")
    diff = points[:, None, :] - points[None, :, :]
    dist = np.sqrt(diff[..., 0] ** 2 + diff[..., 1] ** 2 + diff[..., 2] ** 2)
    np.fill_diagonal(dist, np.inf)
    nearest = np.partition(dist, k - 1, axis=1)[:, :k]
    return np.sort(nearest, axis=1).sum(axis=1) / k
