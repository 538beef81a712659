"""Masked attention over sparse neighbourhoods.

Scores exist only on stored edges, so the softmax is taken over each key's
neighbourhood exactly; absent entries behave as ``-inf`` and contribute
nothing. The normalised scores are then balanced: square root, divide by
column sums, divide by row sums.

The ``*_t`` functions work on :class:`~diffconv.autograd.Tensor` edge values
and are what the layers differentiate through; the plain functions take and
return :class:`~diffconv.core.SparseGraph` objects.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import _backend
from . import autograd as ag
from .core import InvalidInputError, SparseGraph, as_features
from .grouping import dilated_ball_query


@dataclass(frozen=True)
class AttentionConfig:
    input_dim: int
    d_k: int

    def __post_init__(self):
        if self.d_k < 1:
            raise InvalidInputError("d_k must be at least 1")

    @classmethod
    def for_features(cls, d):
        """Attributes are ``d`` features plus 3 coordinates; ``d_k = ceil((d + 3) / 4)``."""
        return cls(d + 3, max(1, math.ceil((d + 3) / 4)))


def _weight(w):
    if hasattr(w, "weight"):
        w = w.weight
    return ag.as_tensor(w)


def edge_scores_t(key_attrs, source_attrs, proj_q, proj_k, graph: SparseGraph):
    key_attrs, source_attrs = ag.as_tensor(key_attrs), ag.as_tensor(source_attrs)
    wq, wk = _weight(proj_q), _weight(proj_k)
    if key_attrs.shape[0] != graph.num_rows or source_attrs.shape[0] != graph.num_sources:
        raise InvalidInputError("attribute rows do not match the graph")
    if wq.shape[1] != wk.shape[1]:
        raise InvalidInputError("query and key projections must share d_k")
    if key_attrs.shape[1] != wq.shape[0] or source_attrs.shape[1] != wk.shape[0]:
        raise InvalidInputError("projection input size does not match attributes")
    q = key_attrs @ wq
    k = source_attrs @ wk
    return ag.edge_dot(q, k, graph.rows, graph.col_indices)


def _require_rows(graph):
    if np.any(graph.degrees == 0):
        raise InvalidInputError("every row needs at least one edge to normalise")


def masked_softmax_t(scores, graph: SparseGraph):
    _require_rows(graph)
    return ag.segment_softmax(scores, graph.row_offsets)


def balanced_renormalize_t(weights, graph: SparseGraph):
    """``sqrt(w)`` divided by its column sums, then by its row sums."""
    _require_rows(graph)
    root = ag.sqrt(weights)
    col = ag.scatter_sum(root, graph.col_indices, graph.num_sources)
    bar = root / ag.take(col, graph.col_indices)
    row = ag.segment_sum(bar, graph.row_offsets)
    return bar / ag.take(row, graph.rows)


def attention_scores(key_attrs, source_attrs, proj_q, proj_k, graph: SparseGraph) -> SparseGraph:
    """Raw scores ``(key_attrs_i Wq) . (source_attrs_j Wk)`` on every edge."""
    key_attrs = as_features(key_attrs, name="key_attrs")
    source_attrs = as_features(source_attrs, name="source_attrs")
    return graph.with_weights(edge_scores_t(key_attrs, source_attrs, proj_q, proj_k, graph).data)


def masked_softmax(scores: SparseGraph) -> SparseGraph:
    if scores.weights is None:
        raise InvalidInputError("masked_softmax needs scored edges")
    return scores.with_weights(masked_softmax_t(scores.weights, scores).data)


def balanced_renormalize(attn: SparseGraph) -> SparseGraph:
    w = attn.weights
    if w is None or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise InvalidInputError("balanced_renormalize needs finite non-negative weights")
    if np.any(_backend.kernels().segment_sum(attn.row_offsets, w) <= 0):
        raise InvalidInputError("a row has no positive weight")
    return attn.with_weights(balanced_renormalize_t(w, attn).data)


def masked_attention_adjacency(p_keys, p_sources, x_keys, x_sources, proj_q, proj_k,
                               bandwidth=0.1, base_sq_radius=0.0125,
                               key_indices=None) -> SparseGraph:
    """Dilated ball query, edge scores, masked softmax and balanced renormalisation."""
    graph = dilated_ball_query(p_keys, p_sources, bandwidth, base_sq_radius, key_indices)
    key_attrs = np.hstack([as_features(x_keys, len(graph.row_offsets) - 1, "x_keys"), p_keys])
    src_attrs = np.hstack([as_features(x_sources, graph.num_sources, "x_sources"), p_sources])
    scores = edge_scores_t(key_attrs, src_attrs, proj_q, proj_k, graph)
    return graph.with_weights(balanced_renormalize_t(masked_softmax_t(scores, graph), graph).data)
