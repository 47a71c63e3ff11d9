"""Deterministic nearest-neighbour helpers on top of ``scipy.spatial.cKDTree``.

cKDTree does not promise an order among equidistant points, so candidates
are re-ranked by exactly recomputed squared distance and then by index.
"""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .errors import NumericalError

_SLACK = 4


def _as_points(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3:
        raise ValueError(f"expected an (n, 3) point array, got shape {x.shape}")
    return x


def _brute_knn(queries, points, k):
    d2 = ((queries[:, None, :] - points[None, :, :]) ** 2).sum(-1)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return order, np.take_along_axis(d2, order, axis=1)


def knn(queries, points, k: int, tree: cKDTree | None = None):
    """The ``k`` nearest ``points`` of every query.

    Returns ``(indices, squared_distances)``, each of shape (m, k), sorted by
    distance with ties broken by lower point index.
    """
    queries = _as_points(queries)
    points = _as_points(points)
    n = len(points)
    if n == 0:
        raise ValueError("empty point set")
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for {n} points")
    if len(queries) == 0:
        return np.empty((0, k), dtype=np.int64), np.empty((0, k))
    tree = tree if tree is not None else cKDTree(points)
    kk = min(n, k + _SLACK)
    _, idx = tree.query(queries, k=kk)
    idx = np.asarray(idx, dtype=np.int64).reshape(len(queries), kk)
    if np.any(idx >= n):
        # cKDTree reports "no neighbour" when distances overflow to inf
        raise NumericalError("nearest-neighbour distances are not finite")
    d2 = ((points[idx] - queries[:, None, :]) ** 2).sum(-1)
    order = _row_lexsort(idx, d2)
    idx = np.take_along_axis(idx, order, axis=1)
    d2 = np.take_along_axis(d2, order, axis=1)
    if kk < n:
        # a tie straddling the candidate cut could hide a lower index
        unsure = d2[:, k - 1] >= d2[:, kk - 1]
        if np.any(unsure):
            bi, bd = _brute_knn(queries[unsure], points, k)
            idx[unsure, :k] = bi
            d2[unsure, :k] = bd
    return idx[:, :k], d2[:, :k]


def _row_lexsort(idx, d2):
    # sort by index first, then stable sort by distance
    o1 = np.argsort(idx, axis=1, kind="stable")
    d_sorted = np.take_along_axis(d2, o1, axis=1)
    o2 = np.argsort(d_sorted, axis=1, kind="stable")
    return np.take_along_axis(o1, o2, axis=1)


def nearest(queries, points, tree: cKDTree | None = None):
    """Index and squared distance of the single nearest point per query."""
    idx, d2 = knn(queries, points, 1, tree)
    return idx[:, 0], d2[:, 0]


def scatter_add(n: int, index, values):
    """Sum rows of ``values`` into an (n, d) array at ``index``."""
    values = np.asarray(values, dtype=np.float64)
    out = np.empty((n, values.shape[1]))
    for j in range(values.shape[1]):
        out[:, j] = np.bincount(index, weights=values[:, j], minlength=n)
    return out
