"""Laplacian-smoothing graph convolutions and the edge-convolution reference.

Conventions: ``x`` holds source features ``(N, d)``, the adjacency has one row
per key point and one column per source, and ``x_keys`` defaults to ``x``
when keys and sources coincide.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _backend
from . import autograd as ag
from .attention import (AttentionConfig, balanced_renormalize_t, edge_scores_t,
                        masked_softmax_t)
from .core import InvalidInputError, SparseGraph, as_cloud, as_features, block_diagonal
from .grouping import DilationField, ball_query, knn_query
from .nn import Linear, Module

GROUPINGS = ("dilated", "ball", "knn")
ADJACENCIES = ("masked", "binary", "isotropic", "spatial", "feature", "inverse_density")
ACTIVATIONS = {"gelu": ag.gelu, "identity": ag.identity}


def _map(fn, x):
    """Apply a learnable map given as a callable or as a weight matrix."""
    if callable(fn):
        return fn(x)
    return ag.as_tensor(x) @ ag.as_tensor(fn)


def _weights_of(adj: SparseGraph):
    if adj.weights is None:
        raise InvalidInputError("adjacency must carry weights")
    return adj.weights


def _key_features(x, x_keys, adj):
    if x_keys is None:
        if adj.num_rows != adj.num_sources:
            raise InvalidInputError("x_keys is required when keys differ from sources")
        return x
    return x_keys


def smooth_t(x_keys, x_src, adj: SparseGraph, weights, laplacian=True):
    """``X_keys - A X_src`` (or just ``A X_src`` with ``laplacian=False``)."""
    agg = ag.spmm(adj.row_offsets, adj.col_indices, weights, x_src, adj.rows)
    return x_keys - agg if laplacian else agg


def laplacian_smooth(x, adj: SparseGraph, x_keys=None) -> np.ndarray:
    x = as_features(x, adj.num_sources, "x")
    xk = as_features(_key_features(x, x_keys, adj), adj.num_rows, "x_keys")
    return smooth_t(xk, x, adj, _weights_of(adj)).data


def diffconv_basic(x, adj: SparseGraph, l_theta, x_keys=None) -> np.ndarray:
    """``l_theta(S || X_keys)`` with ``S`` the Laplacian-smoothed features."""
    x = as_features(x, adj.num_sources, "x")
    xk = as_features(_key_features(x, x_keys, adj), adj.num_rows, "x_keys")
    s = smooth_t(xk, x, adj, _weights_of(adj))
    return _map(l_theta, ag.concat([s, xk])).data


def edgeconv_reference(x, neighbors: SparseGraph, l_theta, aggregation="max",
                       x_keys=None) -> np.ndarray:
    """Per-edge ``l_theta(x_i - x_j || x_i)`` reduced channel-wise by MAX or AVG per row."""
    x = as_features(x, neighbors.num_sources, "x")
    xk = as_features(_key_features(x, x_keys, neighbors), neighbors.num_rows, "x_keys")
    if np.any(neighbors.degrees == 0):
        raise InvalidInputError("edgeconv needs at least one neighbour per row")
    xi = xk[neighbors.rows]
    xj = x[neighbors.col_indices]
    per_edge = _map(l_theta, np.hstack([xi - xj, xi]))
    agg = aggregation.lower()
    if agg == "max":
        return ag.segment_max(per_edge, neighbors.row_offsets).data
    if agg in ("avg", "mean"):
        return ag.segment_mean(per_edge, neighbors.row_offsets).data
    raise InvalidInputError(f"unknown aggregation {aggregation!r}")


def position_embedding_t(p_keys, p_src, adj: SparseGraph, weights):
    """The 9-column block ``(P || A P || P - A P)``."""
    centroid = ag.spmm(adj.row_offsets, adj.col_indices, weights, ag.as_tensor(p_src), adj.rows)
    return ag.concat([ag.as_tensor(p_keys), centroid, p_keys - centroid])


def positional_encoding(p_keys, p_sources, adj: SparseGraph, l_pi) -> np.ndarray:
    p_keys = as_cloud(p_keys, "p_keys")
    p_sources = as_cloud(p_sources, "p_sources")
    if len(p_keys) != adj.num_rows or len(p_sources) != adj.num_sources:
        raise InvalidInputError("point sets do not match the adjacency")
    return _map(l_pi, position_embedding_t(p_keys, p_sources, adj, _weights_of(adj))).data


@dataclass
class Neighbourhood:
    """Grouping result for one or more independent clouds stacked together.

    ``graph`` rows are keys and columns are sources; ``key_index`` locates
    every key among the sources; ``density`` is the raw kernel density of
    every source.
    """

    graph: SparseGraph
    key_index: np.ndarray
    density: np.ndarray

    @classmethod
    def stack(cls, parts):
        base = np.cumsum([0] + [p.graph.num_sources for p in parts[:-1]])
        return cls(block_diagonal([p.graph for p in parts]),
                   np.concatenate([p.key_index + b for p, b in zip(parts, base)]),
                   np.concatenate([p.density for p in parts]))


def group(p_src, key_index, grouping="dilated", base_sq_radius=0.0125, bandwidth=0.1,
          k=16) -> Neighbourhood:
    """Neighbourhoods of ``p_src[key_index]`` among ``p_src`` for one cloud."""
    p_src = as_cloud(p_src, "p_src")
    key_index = np.asarray(key_index, dtype=np.int64)
    field = DilationField.from_cloud(p_src, bandwidth, base_sq_radius)
    keys = p_src[key_index]
    if grouping == "dilated":
        graph = ball_query(keys, p_src, sq_radius=field.sq_radius[key_index])
    elif grouping == "ball":
        graph = ball_query(keys, p_src, sq_radius=np.full(len(keys), base_sq_radius))
    elif grouping == "knn":
        graph = knn_query(keys, p_src, min(k, len(p_src)))
    else:
        raise InvalidInputError(f"unknown grouping {grouping!r}; expected one of {GROUPINGS}")
    return Neighbourhood(graph, key_index, field.density)


def _kernel_weights(sq_dist, graph):
    """Row-normalised Gaussian kernel of edge squared distances, bandwidth set by their mean."""
    scale = ag.total(sq_dist) * (1.0 / max(sq_dist.shape[0], 1)) + 1e-12
    return ag.segment_softmax(sq_dist * -0.5 / scale, graph.row_offsets)


class DiffConvLayer(Module):
    """One difference graph convolution with its grouping and adjacency options.

    The default configuration is the full operator: density-dilated grouping,
    masked attention with balanced renormalisation, Laplacian smoothing,
    positional encoding and GELU. The switches select the ablated variants.
    """

    def __init__(self, in_dim, out_dim, rng, base_sq_radius=0.0125, bandwidth=0.1,
                 activation="gelu", grouping="dilated", adjacency="masked",
                 smoothing=True, positional=True, balanced=True, k=16):
        if grouping not in GROUPINGS:
            raise InvalidInputError(f"unknown grouping {grouping!r}")
        if adjacency not in ADJACENCIES:
            raise InvalidInputError(f"unknown adjacency {adjacency!r}")
        if activation not in ACTIVATIONS:
            raise InvalidInputError(f"unknown activation {activation!r}")
        self.in_dim, self.out_dim = in_dim, out_dim
        self.base_sq_radius = base_sq_radius
        self.bandwidth = bandwidth
        self.activation = activation
        self.grouping = grouping
        self.adjacency = adjacency
        self.smoothing = smoothing
        self.positional = positional
        self.balanced = balanced
        self.k = k
        self.l_theta = Linear(2 * in_dim, out_dim, rng)
        self.l_pi = Linear(9, out_dim, rng) if positional else None
        self.attn = AttentionConfig.for_features(in_dim)
        if adjacency == "masked":
            self.l_phi = Linear(self.attn.input_dim, self.attn.d_k, rng, bias=False)
            self.l_psi = Linear(self.attn.input_dim, self.attn.d_k, rng, bias=False)
        else:
            self.l_phi = self.l_psi = None

    def group(self, p_src, key_index) -> Neighbourhood:
        return group(p_src, key_index, self.grouping, self.base_sq_radius, self.bandwidth, self.k)

    def adjacency_weights(self, nb: Neighbourhood, p_src, x_src, x_keys):
        """Edge weights of the normalised adjacency as a Tensor."""
        g = nb.graph
        p_keys = p_src[nb.key_index]
        if self.adjacency == "masked":
            key_attrs = ag.concat([x_keys, p_keys])
            src_attrs = ag.concat([x_src, p_src])
            scores = edge_scores_t(key_attrs, src_attrs, self.l_phi, self.l_psi, g)
            if not self.balanced:
                # plain scaled dot-product normalisation
                return masked_softmax_t(scores * (1.0 / np.sqrt(self.attn.d_k)), g)
            return balanced_renormalize_t(masked_softmax_t(scores, g), g)
        if self.adjacency in ("binary", "isotropic"):
            return ag.Tensor(1.0 / np.repeat(g.degrees, g.degrees))
        if self.adjacency == "spatial":
            diff = p_keys[g.rows] - p_src[g.col_indices]
            return _kernel_weights(ag.Tensor(np.einsum("ij,ij->i", diff, diff)), g)
        if self.adjacency == "feature":
            diff = ag.take(x_keys, g.rows) - ag.take(x_src, g.col_indices)
            sq = ag.row_sum(diff * diff)
            return _kernel_weights(sq, g)
        # inverse density: neighbours weighted by 1 / kernel density, row-normalised
        inv = 1.0 / nb.density[g.col_indices]
        return ag.Tensor(inv / _backend.kernels().segment_sum(g.row_offsets, inv)[g.rows])

    def __call__(self, p_src, x_src, nb: Neighbourhood, return_adjacency=False):
        p_src = np.asarray(p_src, dtype=np.float64)
        x_src = ag.as_tensor(x_src)
        if x_src.shape != (len(p_src), self.in_dim):
            raise InvalidInputError(
                f"expected source features of shape {(len(p_src), self.in_dim)}, got {x_src.shape}")
        if np.any(nb.graph.degrees == 0):
            raise InvalidInputError("every key needs at least one neighbour")
        x_keys = ag.take(x_src, nb.key_index)
        w = self.adjacency_weights(nb, p_src, x_src, x_keys)
        s = smooth_t(x_keys, x_src, nb.graph, w, laplacian=self.smoothing)
        out = self.l_theta(ag.concat([s, x_keys]))
        if self.positional:
            out = out + self.l_pi(position_embedding_t(p_src[nb.key_index], p_src, nb.graph, w))
        out = ACTIVATIONS[self.activation](out)
        return (out, w) if return_adjacency else out


def diffconv_full(p_keys, p_sources, x_sources, x_keys, layer: DiffConvLayer,
                  key_indices: Optional[np.ndarray] = None) -> np.ndarray:
    """Full convolution for one cloud whose keys are a subset of its sources.

    ``key_indices`` locates the keys among the sources; when omitted it is
    recovered by exact coordinate matching.
    """
    p_keys = as_cloud(p_keys, "p_keys")
    p_sources = as_cloud(p_sources, "p_sources")
    x_sources = as_features(x_sources, len(p_sources), "x_sources")
    if key_indices is None:
        key_indices = _locate(p_keys, p_sources)
    key_indices = np.asarray(key_indices, dtype=np.int64)
    if x_keys is not None:
        xk = as_features(x_keys, len(p_keys), "x_keys")
        if not np.array_equal(xk, x_sources[key_indices]):
            raise InvalidInputError("x_keys must be the features of the key points")
    nb = layer.group(p_sources, key_indices)
    return layer(p_sources, x_sources, nb).data


def _locate(p_keys, p_sources):
    lookup = {tuple(p): i for i, p in reversed(list(enumerate(p_sources)))}
    try:
        return np.array([lookup[tuple(p)] for p in p_keys], dtype=np.int64)
    except KeyError:
        raise InvalidInputError("every key point must also be a source point") from None
