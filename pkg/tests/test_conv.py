import numpy as np
import pytest
from scipy.special import erf

from diffconv import autograd as ag
from diffconv.conv import (DiffConvLayer, diffconv_basic, diffconv_full, edgeconv_reference,
                           group, laplacian_smooth, positional_encoding)
from diffconv.core import InvalidInputError, graph_from_rows
from diffconv.grouping import DilationField, ball_query
from diffconv.nn import grad_check

from test_attention import dense_balanced, dense_softmax


def uniform_rows(graph):
    return graph.with_weights(1.0 / np.repeat(graph.degrees, graph.degrees))


def random_adj(rng, m, n):
    rows = [rng.choice(n, rng.integers(1, 6), replace=False) for _ in range(m)]
    g = graph_from_rows(rows, n)
    w = rng.uniform(0.1, 1, g.num_edges)
    return g.with_weights(w / np.repeat(np.add.reduceat(w, g.row_offsets[:-1]), g.degrees))


def test_smoothing_annihilates_constants(backend, rng):
    adj = random_adj(rng, 10, 10)
    x = np.tile([1.5, -2.0, 0.25], (10, 1))
    np.testing.assert_allclose(laplacian_smooth(x, adj), 0.0, atol=1e-15)


def test_smoothing_two_mutual_neighbours():
    adj = graph_from_rows([[0, 1], [0, 1]], 2, [[0.5, 0.5], [0.5, 0.5]])
    x = np.array([[1.0, 4.0], [3.0, 0.0]])
    s = laplacian_smooth(x, adj)
    np.testing.assert_allclose(s[0], (x[0] - x[1]) / 2)
    np.testing.assert_allclose(s[1], (x[1] - x[0]) / 2)


def test_smoothing_matches_dense(backend, rng):
    adj = random_adj(rng, 15, 20)
    x = rng.normal(size=(20, 4))
    xk = rng.normal(size=(15, 4))
    np.testing.assert_allclose(laplacian_smooth(x, adj, xk), xk - adj.to_dense() @ x, atol=1e-10)


def test_smoothing_needs_key_features_for_subsets(rng):
    with pytest.raises(InvalidInputError):
        laplacian_smooth(rng.normal(size=(20, 2)), random_adj(rng, 5, 20))


def test_basic_selectors(rng):
    adj = random_adj(rng, 8, 8)
    x = rng.normal(size=(8, 3))
    first = np.vstack([np.eye(3), np.zeros((3, 3))])
    second = np.vstack([np.zeros((3, 3)), np.eye(3)])
    np.testing.assert_allclose(diffconv_basic(x, adj, second), x)
    np.testing.assert_allclose(diffconv_basic(x, adj, first), laplacian_smooth(x, adj))


def test_basic_matches_row_loop(backend, rng):
    adj = random_adj(rng, 10, 10)
    x = rng.normal(size=(10, 3))
    w = rng.normal(size=(6, 5))
    dense = adj.to_dense()
    loop = np.array([np.concatenate([x[i] - dense[i] @ x, x[i]]) @ w for i in range(10)])
    np.testing.assert_allclose(diffconv_basic(x, adj, w), loop, atol=1e-10)


def test_edgeconv_self_edge(rng):
    x = rng.normal(size=(4, 2))
    w = rng.normal(size=(4, 3))
    g = graph_from_rows([[i] for i in range(4)], 4)
    expect = np.hstack([np.zeros((4, 2)), x]) @ w
    np.testing.assert_allclose(edgeconv_reference(x, g, w, "max"), expect)


def test_edgeconv_max_single_neighbour(rng):
    x = rng.normal(size=(5, 2))
    w = rng.normal(size=(4, 3))
    g = graph_from_rows([[(i + 1) % 5] for i in range(5)], 5)
    per_edge = np.hstack([x - np.roll(x, -1, axis=0), x]) @ w
    np.testing.assert_allclose(edgeconv_reference(x, g, w, "max"), per_edge)


def test_edgeconv_avg_equals_basic_with_mean_adjacency(backend, rng):
    pts = rng.uniform(-1, 1, (60, 3))
    x = rng.normal(size=(60, 4))
    g = ball_query(pts, pts, 0.5)
    w = rng.normal(size=(8, 6))
    np.testing.assert_allclose(edgeconv_reference(x, g, w, "avg"),
                               diffconv_basic(x, uniform_rows(g), w), atol=1e-9)


def test_edgeconv_unknown_aggregation(rng):
    g = graph_from_rows([[0]], 1)
    with pytest.raises(InvalidInputError):
        edgeconv_reference(np.ones((1, 1)), g, np.ones((2, 1)), "sum")


def test_positional_identity_adjacency(rng):
    p = rng.normal(size=(5, 3))
    eye = graph_from_rows([[i] for i in range(5)], 5, [[1.0]] * 5)
    np.testing.assert_allclose(positional_encoding(p, p, eye, np.eye(9)),
                               np.hstack([p, p, np.zeros((5, 3))]))


def test_positional_centroid():
    src = np.array([[0.0, 0, 0], [1, 0, 0], [-1, 0, 0], [0, 2, 0], [0, -2, 0]])
    g = graph_from_rows([[0, 1, 2, 3, 4]], 5, [[0.2] * 5])
    key = np.array([[0.5, 0.5, 0.0]])
    out = positional_encoding(key, src, g, np.eye(9))
    np.testing.assert_allclose(out, [[0.5, 0.5, 0, 0, 0, 0, 0.5, 0.5, 0]], atol=1e-15)


def test_positional_matches_dense(rng):
    adj = random_adj(rng, 6, 9)
    pk, ps = rng.normal(size=(6, 3)), rng.normal(size=(9, 3))
    w = rng.normal(size=(9, 4))
    ap = adj.to_dense() @ ps
    np.testing.assert_allclose(positional_encoding(pk, ps, adj, w),
                               np.hstack([pk, ap, pk - ap]) @ w, atol=1e-10)


def test_full_single_point(rng):
    layer = DiffConvLayer(2, 3, rng)
    p = np.zeros((1, 3))
    x = np.array([[0.7, -0.3]])
    out = diffconv_full(p, p, x, x, layer, key_indices=np.array([0]))
    pre = np.concatenate([[0.0, 0.0], x[0]]) @ layer.l_theta.weight.data + layer.l_theta.bias.data
    pre += np.concatenate([p[0], p[0], [0, 0, 0]]) @ layer.l_pi.weight.data + layer.l_pi.bias.data
    np.testing.assert_allclose(out[0], 0.5 * pre * (1 + erf(pre / np.sqrt(2))), atol=1e-14)


def test_full_zero_features_zero_pi_gives_constant_rows(rng):
    layer = DiffConvLayer(3, 4, rng)
    layer.l_pi.weight.data[:] = 0
    layer.l_pi.bias.data[:] = 0
    pts = rng.uniform(-1, 1, (30, 3))
    out = diffconv_full(pts, pts, np.zeros((30, 3)), None, layer)
    np.testing.assert_allclose(out, np.tile(out[0], (30, 1)), atol=1e-15)


def _dense_layer(layer, pts, x, keys):
    """Dense reimplementation of the full layer."""
    field = DilationField.from_cloud(pts, layer.bandwidth, layer.base_sq_radius)
    d2 = ((pts[keys][:, None] - pts[None]) ** 2).sum(-1)
    mask = d2 < field.sq_radius[keys][:, None]
    ka = np.hstack([x[keys], pts[keys]])
    sa = np.hstack([x, pts])
    scores = (ka @ layer.l_phi.weight.data) @ (sa @ layer.l_psi.weight.data).T
    a = dense_balanced(dense_softmax(scores, mask))
    s = x[keys] - a @ x
    out = np.hstack([s, x[keys]]) @ layer.l_theta.weight.data + layer.l_theta.bias.data
    ap = a @ pts
    pe = np.hstack([pts[keys], ap, pts[keys] - ap])
    out += pe @ layer.l_pi.weight.data + layer.l_pi.bias.data
    return 0.5 * out * (1 + erf(out / np.sqrt(2)))


def test_full_matches_dense_pipeline(backend, rng):
    for _ in range(5):
        layer = DiffConvLayer(4, 6, rng, base_sq_radius=0.1)
        pts = rng.uniform(-1, 1, (50, 3))
        x = rng.normal(size=(50, 4))
        keys = rng.choice(50, 20, replace=False)
        out = diffconv_full(pts[keys], pts, x, x[keys], layer)
        np.testing.assert_allclose(out, _dense_layer(layer, pts, x, keys), atol=1e-8)


def test_full_rejects_foreign_keys(rng):
    layer = DiffConvLayer(2, 2, rng)
    pts = rng.normal(size=(5, 3))
    with pytest.raises(InvalidInputError):
        diffconv_full(pts + 10, pts, np.ones((5, 2)), None, layer)


def test_group_variants(rng):
    pts = rng.uniform(-1, 1, (64, 3))
    keys = np.arange(0, 64, 2)
    assert np.all(group(pts, keys, "knn", k=5).graph.degrees == 5)
    fixed = group(pts, keys, "ball", 0.05).graph
    assert fixed.same_structure(ball_query(pts[keys], pts, np.sqrt(0.05)))
    with pytest.raises(InvalidInputError):
        group(pts, keys, "voxel")


@pytest.mark.parametrize("adjacency", ["masked", "binary", "isotropic", "spatial", "feature",
                                       "inverse_density"])
def test_adjacencies_are_row_stochastic(adjacency, rng):
    layer = DiffConvLayer(3, 4, rng, base_sq_radius=0.1, adjacency=adjacency)
    pts = rng.uniform(-1, 1, (40, 3))
    nb = layer.group(pts, np.arange(0, 40, 2))
    x = rng.normal(size=(40, 3))
    _, w = layer(pts, x, nb, return_adjacency=True)
    adj = nb.graph.with_weights(w.data)
    assert adj.is_row_stochastic(1e-12)
    if adjacency in ("binary", "isotropic"):
        for i in range(adj.num_rows):
            np.testing.assert_allclose(adj.row_weights(i), 1 / len(adj.row(i)))


@pytest.mark.parametrize("kwargs", [
    {}, {"smoothing": False}, {"grouping": "ball"}, {"grouping": "knn", "k": 4},
    {"adjacency": "binary"}, {"adjacency": "spatial"}, {"adjacency": "feature"},
    {"adjacency": "inverse_density"}, {"positional": False}, {"balanced": False},
])
def test_layer_gradients(kwargs, rng):
    layer = DiffConvLayer(3, 4, rng, base_sq_radius=0.15, **kwargs)
    pts = rng.uniform(-1, 1, (16, 3))
    nb = layer.group(pts, rng.choice(16, 8, replace=False))
    x = ag.Parameter(rng.normal(size=(16, 3)))
    err, _ = grad_check(lambda: ag.total(layer(pts, x, nb) * layer(pts, x, nb)),
                        layer.parameters() + [x])
    assert err < 1e-4


def test_layer_rejects_bad_options(rng):
    for kw in ({"grouping": "x"}, {"adjacency": "x"}, {"activation": "x"}):
        with pytest.raises(InvalidInputError):
            DiffConvLayer(2, 2, rng, **kw)
