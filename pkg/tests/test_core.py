import numpy as np
import pytest
from hypothesis import given, strategies as st

from diffconv.core import (InvalidInputError, SparseGraph, as_cloud, block_diagonal,
                           graph_from_rows, pairwise_sq_distances, spmm)


def test_pairwise_two_points(backend):
    a = np.array([[0.0, 0, 0], [1, 0, 0]])
    np.testing.assert_array_equal(pairwise_sq_distances(a, a), [[0, 1], [1, 0]])


def test_pairwise_duplicates_give_zero(backend):
    a = np.tile([[0.3, -0.2, 0.7]], (4, 1))
    assert np.all(pairwise_sq_distances(a, a) == 0)


def test_pairwise_matches_loop(backend, rng):
    a, b = rng.normal(size=(64, 3)), rng.normal(size=(50, 3))
    loop = np.array([[sum((x - y) ** 2 for x, y in zip(p, q)) for q in b] for p in a])
    np.testing.assert_allclose(pairwise_sq_distances(a, b), loop, rtol=1e-12, atol=1e-12)


def test_pairwise_nonnegative_under_cancellation(backend):
    a = np.full((3, 3), 1e8) + np.arange(9).reshape(3, 3) * 1e-8
    assert np.all(pairwise_sq_distances(a, a) >= 0)


@pytest.mark.parametrize("bad", [np.zeros((3, 2)), np.array([[0, 0, np.nan]]), np.zeros(3)])
def test_as_cloud_rejects(bad):
    with pytest.raises(InvalidInputError):
        as_cloud(bad)


def test_graph_from_rows_sorts_and_keeps_empty_rows():
    g = graph_from_rows([[1, 0], []], 2)
    assert g.row_offsets.tolist() == [0, 2, 2]
    assert g.col_indices.tolist() == [0, 1]


def test_graph_from_rows_dedups():
    g = graph_from_rows([[0, 0]], 1, weights=[[0.25, 0.75]])
    assert g.col_indices.tolist() == [0]
    assert g.weights.tolist() == [0.25]


def test_graph_rejects_out_of_range():
    with pytest.raises(InvalidInputError):
        graph_from_rows([[3]], 2)
    with pytest.raises(InvalidInputError):
        SparseGraph(np.array([0, 2]), np.array([0]), 3)


@given(st.lists(st.lists(st.integers(0, 19), max_size=8), min_size=1, max_size=12))
def test_graph_round_trip_preserves_sets(rows):
    g = graph_from_rows(rows, 20)
    assert [set(r) for r in g.to_rows()] == [set(r) for r in rows]
    for r in g.to_rows():
        assert r == sorted(set(r))


def test_spmm_identity_and_empty_row(backend, rng):
    x = rng.normal(size=(4, 5))
    eye = graph_from_rows([[0], [1], [2], [3]], 4, [[1.0]] * 4)
    np.testing.assert_array_equal(spmm(eye, x), x)
    g = graph_from_rows([[0, 2], []], 4, [[0.5, 0.5], []])
    out = spmm(g, x)
    np.testing.assert_array_equal(out[1], 0.0)


def test_spmm_matches_dense(backend, rng):
    rows = [rng.choice(30, rng.integers(0, 8), replace=False) for _ in range(25)]
    w = [rng.normal(size=len(r)) for r in rows]
    g = graph_from_rows(rows, 30, w)
    x = rng.normal(size=(30, 7))
    np.testing.assert_allclose(spmm(g, x), g.to_dense() @ x, atol=1e-10)


def test_spmm_requires_weights():
    with pytest.raises(InvalidInputError):
        spmm(graph_from_rows([[0]], 1), np.ones((1, 2)))


def test_block_diagonal_offsets_sources():
    a = graph_from_rows([[0, 1]], 2, [[1.0, 2.0]])
    b = graph_from_rows([[0], [0]], 1, [[3.0], [4.0]])
    g = block_diagonal([a, b])
    assert g.num_sources == 3
    assert g.to_rows() == [[0, 1], [2], [2]]
    dense = np.zeros((3, 3))
    dense[0, :2] = [1, 2]
    dense[1, 2], dense[2, 2] = 3, 4
    np.testing.assert_array_equal(g.to_dense(), dense)


def test_row_stochastic_and_reverse_fraction():
    sym = graph_from_rows([[0, 1], [0, 1]], 2, [[0.5, 0.5], [0.5, 0.5]])
    assert sym.is_row_stochastic()
    assert sym.reverse_edge_fraction() == 0.0
    directed = graph_from_rows([[0, 1], [1]], 2)
    assert directed.reverse_edge_fraction() == pytest.approx(1 / 3)
