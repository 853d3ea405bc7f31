"""Chamfer distance and voxelized Jensen-Shannon divergence between clouds."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

DEFAULT_RESOLUTION = 0.15


def _as_points(cloud) -> np.ndarray:
    pts = getattr(cloud, "points", cloud)
    return np.asarray(pts, dtype=np.float64).reshape(-1, 3)


def _dist(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    diff = q - p
    return np.sqrt(np.sum(diff * diff, axis=-1))


class NearestNeighborIndex:
    """Exact nearest-neighbor search over a fixed point set.

    Backed by a balanced k-d tree; a few candidates are re-ranked by
    (distance, index) so results equal a linear scan, ties going to the
    lowest point index.
    """

    def __init__(self, points, candidates: int = 4):
        self.points = _as_points(points)
        if self.points.shape[0] == 0:
            raise ValueError("cannot index an empty point set")
        self._tree = cKDTree(self.points, balanced_tree=True)
        self._k = min(candidates, self.points.shape[0])

    def query(self, queries) -> tuple[np.ndarray, np.ndarray]:
        q = _as_points(queries)
        _, idx = self._tree.query(q, k=self._k)
        idx = idx.reshape(q.shape[0], self._k)
        d = _dist(q[:, None, :], self.points[idx])
        # lexicographic (distance, index) minimum among the candidates
        order = np.lexsort((idx, d), axis=1)[:, 0]
        rows = np.arange(q.shape[0])
        return d[rows, order], idx[rows, order]


def linear_scan_nn(points, queries) -> tuple[np.ndarray, np.ndarray]:
    p, q = _as_points(points), _as_points(queries)
    dist = np.empty(q.shape[0])
    idx = np.empty(q.shape[0], dtype=np.int64)
    for i, qi in enumerate(q):
        d = _dist(qi[None, :], p)
        j = int(np.argmin(d))
        dist[i], idx[i] = d[j], j
    return dist, idx


def directed_mean_distance(src, dst) -> float:
    d, _ = NearestNeighborIndex(dst).query(src)
    return float(np.mean(d))


def chamfer(a, b) -> float:
    """Mean nearest distance a->b plus mean nearest distance b->a (meters)."""
    pa, pb = _as_points(a), _as_points(b)
    if pa.shape[0] == 0 or pb.shape[0] == 0:
        raise ValueError("chamfer distance needs two non-empty clouds")
    return directed_mean_distance(pa, pb) + directed_mean_distance(pb, pa)


def voxel_counts(a, b, resolution: float = DEFAULT_RESOLUTION) -> tuple[np.ndarray, np.ndarray]:
    """Per-voxel point counts of both clouds on one grid over their padded union box."""
    if not resolution > 0 or not np.isfinite(resolution):
        raise ValueError(f"voxel resolution must be positive, got {resolution}")
    pa, pb = _as_points(a), _as_points(b)
    if pa.shape[0] == 0 or pb.shape[0] == 0:
        raise ValueError("JSD needs two non-empty clouds")
    both = np.concatenate([pa, pb])
    origin = both.min(axis=0) - resolution
    cells = np.floor((both - origin) / resolution).astype(np.int64)
    dims = cells.max(axis=0) + 2
    key = (cells[:, 0] * dims[1] + cells[:, 1]) * dims[2] + cells[:, 2]
    _, inv = np.unique(key, return_inverse=True)
    inv = inv.reshape(-1)
    n_vox = int(inv.max()) + 1
    ca = np.bincount(inv[:pa.shape[0]], minlength=n_vox)
    cb = np.bincount(inv[pa.shape[0]:], minlength=n_vox)
    return ca, cb


def jsd_from_counts(ca: np.ndarray, cb: np.ndarray) -> float:
    """Base-2 Jensen-Shannon divergence of two count histograms, in [0, 1]."""
    ca = np.asarray(ca, dtype=np.float64)
    cb = np.asarray(cb, dtype=np.float64)
    na, nb = ca.sum(), cb.sum()
    p, q = ca / na, cb / nb
    m = (p + q) / 2

    def half_kl(c, P, n):
        nz = c > 0
        return np.sum(c[nz] * np.log2(P[nz] / m[nz])) / n / 2

    return float(np.clip(half_kl(ca, p, na) + half_kl(cb, q, nb), 0.0, 1.0))


def jsd_voxel(a, b, resolution: float = DEFAULT_RESOLUTION) -> float:
    return jsd_from_counts(*voxel_counts(a, b, resolution))
