"""Shared value types: point clouds, feature matrices and sparse directed graphs.

Point clouds and feature matrices are plain ``float64`` numpy arrays of shape
``(N, 3)`` and ``(N, d)``; the helpers here validate them. Graphs are stored
row-compressed (one row per key point, columns index source points).
"""

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _backend


class InvalidInputError(ValueError):
    """Raised when an operation receives arguments violating its contract."""


def as_cloud(points, name="cloud") -> np.ndarray:
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise InvalidInputError(f"{name} must have shape (N, 3), got {arr.shape}")
    if arr.shape[0] == 0:
        raise InvalidInputError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite coordinates")
    return np.ascontiguousarray(arr)


def as_features(values, rows: Optional[int] = None, name="features") -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D, got shape {arr.shape}")
    if rows is not None and arr.shape[0] != rows:
        raise InvalidInputError(f"{name} has {arr.shape[0]} rows, expected {rows}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return np.ascontiguousarray(arr)


def pairwise_sq_distances(a, b) -> np.ndarray:
    """Squared Euclidean distances between every row of ``a`` and of ``b``.

    Computed from coordinate differences (not the ``|a|^2 + |b|^2 - 2ab``
    expansion) so self-distances are exactly zero.
    """
    a = as_cloud(a, "a")
    b = as_cloud(b, "b")
    return _backend.kernels().pairwise_sq_distances(a, b)


@dataclass(frozen=True, eq=False)
class SparseGraph:
    """Row-compressed directed graph from ``num_rows`` keys to ``num_sources`` sources.

    Column indices are sorted and unique within every row. ``weights`` is
    optional and aligned with ``col_indices``.
    """

    row_offsets: np.ndarray
    col_indices: np.ndarray
    num_sources: int
    weights: Optional[np.ndarray] = None
    _rows: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        off = np.ascontiguousarray(self.row_offsets, dtype=np.int64)
        cols = np.ascontiguousarray(self.col_indices, dtype=np.int64)
        object.__setattr__(self, "row_offsets", off)
        object.__setattr__(self, "col_indices", cols)
        if off.ndim != 1 or off.shape[0] < 1 or off[0] != 0 or off[-1] != cols.shape[0]:
            raise InvalidInputError("row_offsets must start at 0 and end at the edge count")
        if np.any(np.diff(off) < 0):
            raise InvalidInputError("row_offsets must be non-decreasing")
        if cols.size and (cols.min() < 0 or cols.max() >= self.num_sources):
            raise InvalidInputError("column index out of range")
        if self.weights is not None:
            w = np.ascontiguousarray(self.weights, dtype=np.float64)
            if w.shape != cols.shape:
                raise InvalidInputError("weights must align with col_indices")
            object.__setattr__(self, "weights", w)

    @property
    def num_rows(self) -> int:
        return self.row_offsets.shape[0] - 1

    @property
    def num_edges(self) -> int:
        return self.col_indices.shape[0]

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.row_offsets)

    @property
    def rows(self) -> np.ndarray:
        """Row index of every edge (expanded ``row_offsets``)."""
        if self._rows is None:
            object.__setattr__(self, "_rows",
                               np.repeat(np.arange(self.num_rows, dtype=np.int64), self.degrees))
        return self._rows

    def row(self, i) -> np.ndarray:
        return self.col_indices[self.row_offsets[i]:self.row_offsets[i + 1]]

    def row_weights(self, i) -> np.ndarray:
        return self.weights[self.row_offsets[i]:self.row_offsets[i + 1]]

    def to_rows(self):
        return [self.row(i).tolist() for i in range(self.num_rows)]

    def with_weights(self, weights) -> "SparseGraph":
        return SparseGraph(self.row_offsets, self.col_indices, self.num_sources,
                           np.asarray(weights, dtype=np.float64), self._rows)

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.num_rows, self.num_sources))
        w = self.weights if self.weights is not None else np.ones(self.num_edges)
        dense[self.rows, self.col_indices] = w
        return dense

    def mask(self) -> np.ndarray:
        dense = np.zeros((self.num_rows, self.num_sources), dtype=bool)
        dense[self.rows, self.col_indices] = True
        return dense

    def same_structure(self, other: "SparseGraph") -> bool:
        return (self.num_sources == other.num_sources
                and np.array_equal(self.row_offsets, other.row_offsets)
                and np.array_equal(self.col_indices, other.col_indices))

    def is_row_stochastic(self, tol=1e-6) -> bool:
        if self.weights is None or np.any(self.weights < 0):
            return False
        sums = _backend.kernels().segment_sum(self.row_offsets, self.weights)
        return bool(np.all(np.abs(sums - 1.0) <= tol))

    def reverse_edge_fraction(self) -> float:
        """Fraction of edges (i, j) with no reverse edge (j, i).

        Only meaningful when keys and sources are the same point set.
        """
        if self.num_edges == 0:
            return 0.0
        n = max(self.num_rows, self.num_sources)
        fwd = self.rows * n + self.col_indices
        rev = self.col_indices * n + self.rows
        return float(np.mean(~np.isin(fwd, rev)))


def graph_from_rows(rows: Sequence[Sequence[int]], num_sources: int,
                    weights: Optional[Sequence[Sequence[float]]] = None) -> SparseGraph:
    """Build a canonical graph from per-row neighbour lists.

    Rows are sorted and de-duplicated; for a duplicated index the first
    supplied weight is kept.
    """
    offsets = [0]
    cols = []
    vals = []
    for i, row in enumerate(rows):
        idx = np.asarray(row, dtype=np.int64).reshape(-1)
        if idx.size and (idx.min() < 0 or idx.max() >= num_sources):
            raise InvalidInputError(f"row {i} has an index outside [0, {num_sources})")
        uniq, first = np.unique(idx, return_index=True)
        cols.append(uniq)
        if weights is not None:
            w = np.asarray(weights[i], dtype=np.float64).reshape(-1)
            if w.shape != idx.shape:
                raise InvalidInputError(f"row {i} weights do not match its indices")
            vals.append(w[first])
        offsets.append(offsets[-1] + uniq.size)
    col_arr = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
    w_arr = None
    if weights is not None:
        w_arr = np.concatenate(vals) if vals else np.zeros(0)
    return SparseGraph(np.asarray(offsets), col_arr, int(num_sources), w_arr)


def spmm(graph: SparseGraph, x) -> np.ndarray:
    """Weighted neighbour aggregation: row i is ``sum_j w_ij x_j``; empty rows give zeros."""
    if graph.weights is None:
        raise InvalidInputError("spmm needs a weighted graph")
    x = as_features(x)
    if x.shape[0] != graph.num_sources:
        raise InvalidInputError(
            f"graph has {graph.num_sources} sources but features have {x.shape[0]} rows")
    return _backend.kernels().spmm(graph.row_offsets, graph.col_indices, graph.weights, x)


def block_diagonal(graphs: Sequence[SparseGraph]) -> SparseGraph:
    """Stack independent graphs into one; sources of graph b are offset by the earlier sources."""
    offsets = [np.zeros(1, dtype=np.int64)]
    cols = []
    weights = []
    edge_base = 0
    src_base = 0
    has_w = all(g.weights is not None for g in graphs)
    for g in graphs:
        offsets.append(g.row_offsets[1:] + edge_base)
        cols.append(g.col_indices + src_base)
        if has_w:
            weights.append(g.weights)
        edge_base += g.num_edges
        src_base += g.num_sources
    return SparseGraph(np.concatenate(offsets), np.concatenate(cols) if cols else np.zeros(0),
                       src_base, np.concatenate(weights) if has_w and weights else None)
