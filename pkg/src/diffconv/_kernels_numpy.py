"""Vectorised numpy/scipy versions of the kernels in ``_kernels_numba``.

Used when numba is unavailable or ``DIFFCONV_BACKEND=numpy``.
"""

import numpy as np
import scipy.sparse as sp

_CHUNK = 1024


def pairwise_sq_distances(a, b):
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def kernel_density_sums(queries, sources, inv_two_h_sq):
    out = np.empty(queries.shape[0])
    for lo in range(0, queries.shape[0], _CHUNK):
        d2 = pairwise_sq_distances(queries[lo:lo + _CHUNK], sources)
        out[lo:lo + _CHUNK] = np.exp(-d2 * inv_two_h_sq).sum(axis=1)
    return out


def _mask_to_csr(mask):
    rows, cols = np.nonzero(mask)
    counts = np.bincount(rows, minlength=mask.shape[0])
    offsets = np.zeros(mask.shape[0] + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return offsets, cols.astype(np.int64)


def ball_query_brute(keys, sources, sq_radii):
    offsets = [np.zeros(1, dtype=np.int64)]
    cols = []
    base = 0
    for lo in range(0, keys.shape[0], _CHUNK):
        d2 = pairwise_sq_distances(keys[lo:lo + _CHUNK], sources)
        off, c = _mask_to_csr(d2 < sq_radii[lo:lo + _CHUNK, None])
        offsets.append(off[1:] + base)
        cols.append(c)
        base += c.shape[0]
    return np.concatenate(offsets), np.concatenate(cols) if cols else np.zeros(0, np.int64)


def knn_brute(keys, sources, k):
    m = keys.shape[0]
    cols = np.empty((m, k), dtype=np.int64)
    for lo in range(0, m, _CHUNK):
        d2 = pairwise_sq_distances(keys[lo:lo + _CHUNK], sources)
        order = np.argsort(d2, axis=1, kind="stable")[:, :k]
        cols[lo:lo + _CHUNK] = np.sort(order, axis=1)
    return np.arange(m + 1, dtype=np.int64) * k, cols.ravel()


def _leaf_order(node_start, node_end, node_left):
    return np.flatnonzero(node_left < 0)


def kdtree_ball(points, perm, node_lo, node_hi, node_start, node_end,
                node_left, node_right, keys, sq_radii):
    leaves = _leaf_order(node_start, node_end, node_left)
    rows = []
    for i in range(keys.shape[0]):
        q = keys[i]
        # prune leaves by box distance, then filter the survivors exactly
        gap = np.maximum(node_lo[leaves] - q, 0.0) + np.maximum(q - node_hi[leaves], 0.0)
        hit = leaves[(gap * gap).sum(axis=1) < sq_radii[i]]
        cand = np.concatenate([perm[node_start[n]:node_end[n]] for n in hit]) if hit.size else \
            np.zeros(0, dtype=np.int64)
        diff = points[cand] - q
        rows.append(np.sort(cand[np.einsum("ij,ij->i", diff, diff) < sq_radii[i]]))
    offsets = np.zeros(keys.shape[0] + 1, dtype=np.int64)
    np.cumsum([r.shape[0] for r in rows], out=offsets[1:])
    cols = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
    return offsets, cols.astype(np.int64)


def kdtree_knn(points, perm, node_lo, node_hi, node_start, node_end,
               node_left, node_right, keys, k):
    leaves = _leaf_order(node_start, node_end, node_left)
    m = keys.shape[0]
    cols = np.empty((m, k), dtype=np.int64)
    for i in range(m):
        q = keys[i]
        gap = np.maximum(node_lo[leaves] - q, 0.0) + np.maximum(q - node_hi[leaves], 0.0)
        box_d = (gap * gap).sum(axis=1)
        order = np.argsort(box_d, kind="stable")
        cand = np.zeros(0, dtype=np.int64)
        # grow the candidate set leaf by leaf until the k-th distance is settled
        for pos, leaf in enumerate(leaves[order]):
            cand = np.concatenate([cand, perm[node_start[leaf]:node_end[leaf]]])
            if cand.shape[0] < k:
                continue
            if pos + 1 < order.shape[0]:
                diff = points[cand] - q
                kth = np.partition(np.einsum("ij,ij->i", diff, diff), k - 1)[k - 1]
                if box_d[order[pos + 1]] <= kth:
                    continue
            break
        cand = np.sort(cand)
        diff = points[cand] - q
        d2 = np.einsum("ij,ij->i", diff, diff)
        cols[i] = np.sort(cand[np.argsort(d2, kind="stable")[:k]])
    return np.arange(m + 1, dtype=np.int64) * k, cols.ravel()


def _csr(offsets, cols, weights, num_sources):
    m = offsets.shape[0] - 1
    return sp.csr_matrix((weights, cols, offsets), shape=(m, num_sources))


def spmm(offsets, cols, weights, x):
    return np.asarray(_csr(offsets, cols, weights, x.shape[0]) @ x)


def spmm_transpose(offsets, cols, weights, g, num_sources):
    return np.asarray(_csr(offsets, cols, weights, num_sources).T @ g)


def edge_dot(rows, cols, q, k):
    return np.einsum("ij,ij->i", q[rows], k[cols])


def segment_sum(offsets, values):
    m = offsets.shape[0] - 1
    agg = _csr(offsets, np.arange(values.shape[0]), np.ones(values.shape[0]), values.shape[0])
    if m == 0:
        return np.zeros((0,) + values.shape[1:])
    return np.asarray(agg @ values).reshape((m,) + values.shape[1:])


def _nonempty_starts(offsets):
    starts = offsets[:-1]
    keep = offsets[1:] > starts
    return keep, starts[keep]


def segment_softmax(offsets, values):
    out = np.empty_like(values)
    keep, starts = _nonempty_starts(offsets)
    if starts.size == 0:
        return out
    counts = np.diff(offsets)
    row_max = np.zeros(offsets.shape[0] - 1)
    row_max[keep] = np.maximum.reduceat(values, starts)
    ex = np.exp(values - np.repeat(row_max, counts))
    tot = np.zeros(offsets.shape[0] - 1)
    tot[keep] = np.add.reduceat(ex, starts)
    out[:] = ex / np.repeat(tot, counts)
    return out


def segment_max(offsets, x):
    m = offsets.shape[0] - 1
    out = np.zeros((m, x.shape[1]))
    arg = np.full((m, x.shape[1]), -1, dtype=np.int64)
    keep, starts = _nonempty_starts(offsets)
    if starts.size == 0:
        return out, arg
    counts = np.diff(offsets)
    out[keep] = np.maximum.reduceat(x, starts, axis=0)
    # first row in each segment attaining the maximum
    rows = np.repeat(np.arange(m), counts)
    hit = x == out[rows]
    idx = np.where(hit, np.arange(x.shape[0])[:, None], np.iinfo(np.int64).max)
    arg[keep] = np.minimum.reduceat(idx, starts, axis=0)
    return out, arg


def scatter_add(index, values, n):
    if values.ndim == 1:
        return np.bincount(index, weights=values, minlength=n).astype(np.float64)
    agg = sp.csr_matrix((np.ones(index.shape[0]), (index, np.arange(index.shape[0]))),
                        shape=(n, index.shape[0]))
    return np.asarray(agg @ values.reshape(values.shape[0], -1)).reshape((n,) + values.shape[1:])
