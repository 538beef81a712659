"""Kernel density, density-dilated radii and neighbourhood queries.

Ball queries use the strict test ``|p_i - p_j| < r_i`` (compared in squared
form), so a key that is also a source is always its own neighbour. KNN ties
are broken towards the lower source index.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import _backend
from .core import InvalidInputError, SparseGraph, as_cloud

LEAF_SIZE = 16
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def kernel_density(cloud, bandwidth: float, queries=None) -> np.ndarray:
    """Gaussian kernel density of every point, self-term included.

    ``d_i = 1/(N h) * sum_j exp(-|p_i - p_j|^2 / (2 h^2)) / sqrt(2 pi)``

    Args:
        cloud: ``(N, 3)`` source points.
        bandwidth: kernel bandwidth ``h > 0``.
        queries: optional ``(M, 3)`` points to evaluate at instead of the
            sources themselves.
    """
    if not bandwidth > 0:
        raise InvalidInputError(f"bandwidth must be positive, got {bandwidth}")
    src = as_cloud(cloud)
    q = src if queries is None else as_cloud(queries, "queries")
    sums = _backend.kernels().kernel_density_sums(q, src, 1.0 / (2.0 * bandwidth * bandwidth))
    return sums * (_INV_SQRT_2PI / (src.shape[0] * bandwidth))


def normalize_density(density) -> np.ndarray:
    d = np.asarray(density, dtype=np.float64)
    if d.size == 0 or not np.all(d > 0):
        raise InvalidInputError("densities must be positive")
    return d / d.max()


def dilated_radii(normalized_density, base_sq_radius: float) -> np.ndarray:
    """Per-point search radius ``sqrt(r^2 (1 + d_hat))``."""
    return np.sqrt(dilated_sq_radii(normalized_density, base_sq_radius))


def dilated_sq_radii(normalized_density, base_sq_radius: float) -> np.ndarray:
    if not base_sq_radius > 0:
        raise InvalidInputError(f"squared radius must be positive, got {base_sq_radius}")
    d = np.asarray(normalized_density, dtype=np.float64)
    if np.any(d < 0) or np.any(d > 1) or not np.all(np.isfinite(d)):
        raise InvalidInputError("normalized density must lie in [0, 1]")
    return base_sq_radius * (1.0 + d)


@dataclass(frozen=True)
class DilationField:
    density: np.ndarray
    normalized_density: np.ndarray
    radius: np.ndarray
    sq_radius: np.ndarray

    @classmethod
    def from_cloud(cls, cloud, bandwidth: float, base_sq_radius: float) -> "DilationField":
        d = kernel_density(cloud, bandwidth)
        dn = normalize_density(d)
        sq = dilated_sq_radii(dn, base_sq_radius)
        return cls(d, dn, np.sqrt(sq), sq)

    def take(self, idx) -> "DilationField":
        return DilationField(self.density[idx], self.normalized_density[idx],
                             self.radius[idx], self.sq_radius[idx])


def _sq_radii(radius, m):
    r = np.asarray(radius, dtype=np.float64)
    if r.ndim == 0:
        r = np.full(m, float(r))
    if r.shape != (m,):
        raise InvalidInputError(f"expected a scalar radius or {m} per-key radii")
    if not np.all(r > 0):
        raise InvalidInputError("radii must be positive")
    return r * r


def _check_sq(sq_radius, m):
    sq = np.asarray(sq_radius, dtype=np.float64)
    if sq.ndim == 0:
        sq = np.full(m, float(sq))
    if sq.shape != (m,) or not np.all(sq > 0):
        raise InvalidInputError("squared radii must be positive, one per key")
    return sq


def ball_query(keys, sources, radius=None, *, sq_radius=None) -> SparseGraph:
    """All sources strictly inside each key's ball.

    Pass either ``radius`` (scalar or per key) or ``sq_radius``; the squared
    form avoids a sqrt/square round trip for dilated radii.
    """
    keys = as_cloud(keys, "keys")
    sources = as_cloud(sources, "sources")
    sq = _check_sq(sq_radius, len(keys)) if sq_radius is not None else _sq_radii(radius, len(keys))
    off, cols = _backend.kernels().ball_query_brute(keys, sources, sq)
    return SparseGraph(off, cols, len(sources))


def dilated_ball_query(keys, sources, bandwidth: float, base_sq_radius: float,
                       key_indices=None) -> SparseGraph:
    """Ball query with radii dilated by the sources' kernel density.

    ``key_indices`` locates the keys inside ``sources``; without it the key
    densities are evaluated directly against the sources.
    """
    sources = as_cloud(sources, "sources")
    field_ = DilationField.from_cloud(sources, bandwidth, base_sq_radius)
    if key_indices is not None:
        sq = field_.sq_radius[np.asarray(key_indices)]
    else:
        kd = kernel_density(sources, bandwidth, queries=keys) / field_.density.max()
        sq = dilated_sq_radii(np.minimum(kd, 1.0), base_sq_radius)
    return ball_query(keys, sources, sq_radius=sq)


def knn_query(keys, sources, k: int) -> SparseGraph:
    keys = as_cloud(keys, "keys")
    sources = as_cloud(sources, "sources")
    if not 1 <= k <= len(sources):
        raise InvalidInputError(f"k must be in [1, {len(sources)}], got {k}")
    off, cols = _backend.kernels().knn_brute(keys, sources, int(k))
    return SparseGraph(off, cols, len(sources))


class KdTree:
    """Balanced 3-d tree: median split on the widest axis, leaves of at most ``leaf_size``.

    Nodes are stored in flat arrays. Each node owns the contiguous slice
    ``perm[start:end]`` of point indices and the bounding box of those points.
    """

    def __init__(self, cloud, leaf_size: int = LEAF_SIZE):
        self.points = as_cloud(cloud)
        self.leaf_size = int(leaf_size)
        n = len(self.points)
        self.perm = np.arange(n, dtype=np.int64)
        lo, hi, start, end, left, right = [], [], [], [], [], []
        axes, splits = [], []

        def new_node(s, e):
            pts = self.points[self.perm[s:e]]
            lo.append(pts.min(axis=0))
            hi.append(pts.max(axis=0))
            start.append(s)
            end.append(e)
            left.append(-1)
            right.append(-1)
            axes.append(-1)
            splits.append(np.nan)
            return len(start) - 1

        root = new_node(0, n)
        todo = [root]
        while todo:
            node = todo.pop()
            s, e = start[node], end[node]
            if e - s <= self.leaf_size:
                continue
            axis = int(np.argmax(hi[node] - lo[node]))
            seg = self.perm[s:e]
            mid = (e - s) // 2
            part = np.argpartition(self.points[seg, axis], mid, kind="introselect")
            self.perm[s:e] = seg[part]
            axes[node] = axis
            splits[node] = self.points[self.perm[s + mid], axis]
            left[node] = new_node(s, s + mid)
            right[node] = new_node(s + mid, e)
            todo.extend((left[node], right[node]))

        self.node_lo = np.asarray(lo)
        self.node_hi = np.asarray(hi)
        self.node_start = np.asarray(start, dtype=np.int64)
        self.node_end = np.asarray(end, dtype=np.int64)
        self.node_left = np.asarray(left, dtype=np.int64)
        self.node_right = np.asarray(right, dtype=np.int64)
        self.split_axis = np.asarray(axes, dtype=np.int64)
        self.split_value = np.asarray(splits)

    def __len__(self):
        return len(self.points)

    @property
    def leaves(self):
        return np.flatnonzero(self.node_left < 0)

    def _arrays(self):
        return (self.points, self.perm, self.node_lo, self.node_hi, self.node_start,
                self.node_end, self.node_left, self.node_right)

    def ball(self, keys, radius=None, *, sq_radius=None) -> SparseGraph:
        keys = as_cloud(keys, "keys")
        sq = _check_sq(sq_radius, len(keys)) if sq_radius is not None else _sq_radii(radius, len(keys))
        off, cols = _backend.kernels().kdtree_ball(*self._arrays(), keys, sq)
        return SparseGraph(off, cols, len(self.points))

    def knn(self, keys, k: int) -> SparseGraph:
        keys = as_cloud(keys, "keys")
        if not 1 <= k <= len(self.points):
            raise InvalidInputError(f"k must be in [1, {len(self.points)}], got {k}")
        off, cols = _backend.kernels().kdtree_knn(*self._arrays(), keys, int(k))
        return SparseGraph(off, cols, len(self.points))


def kdtree_build(cloud, leaf_size: int = LEAF_SIZE) -> KdTree:
    return KdTree(cloud, leaf_size)


def kdtree_ball(tree: KdTree, keys, radius=None, *, sq_radius=None) -> SparseGraph:
    return tree.ball(keys, radius, sq_radius=sq_radius)


def kdtree_knn(tree: KdTree, keys, k: int) -> SparseGraph:
    return tree.knn(keys, k)
