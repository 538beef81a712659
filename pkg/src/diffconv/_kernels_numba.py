"""Numba-compiled inner loops.

Every function here has a counterpart with the same signature in
``_kernels_numpy``; ``diffconv._backend`` picks one of the two modules.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def pairwise_sq_distances(a, b):
    m, n = a.shape[0], b.shape[0]
    out = np.empty((m, n))
    for i in range(m):
        for j in range(n):
            d0 = a[i, 0] - b[j, 0]
            d1 = a[i, 1] - b[j, 1]
            d2 = a[i, 2] - b[j, 2]
            out[i, j] = d0 * d0 + d1 * d1 + d2 * d2
    return out


@njit(cache=True)
def kernel_density_sums(queries, sources, inv_two_h_sq):
    m, n = queries.shape[0], sources.shape[0]
    out = np.empty(m)
    for i in range(m):
        s = 0.0
        for j in range(n):
            d0 = queries[i, 0] - sources[j, 0]
            d1 = queries[i, 1] - sources[j, 1]
            d2 = queries[i, 2] - sources[j, 2]
            s += math.exp(-(d0 * d0 + d1 * d1 + d2 * d2) * inv_two_h_sq)
        out[i] = s
    return out


@njit(cache=True)
def ball_query_brute(keys, sources, sq_radii):
    m, n = keys.shape[0], sources.shape[0]
    counts = np.zeros(m + 1, dtype=np.int64)
    for i in range(m):
        c = 0
        for j in range(n):
            d0 = keys[i, 0] - sources[j, 0]
            d1 = keys[i, 1] - sources[j, 1]
            d2 = keys[i, 2] - sources[j, 2]
            if d0 * d0 + d1 * d1 + d2 * d2 < sq_radii[i]:
                c += 1
        counts[i + 1] = c
    offsets = np.cumsum(counts)
    cols = np.empty(offsets[m], dtype=np.int64)
    for i in range(m):
        pos = offsets[i]
        for j in range(n):
            d0 = keys[i, 0] - sources[j, 0]
            d1 = keys[i, 1] - sources[j, 1]
            d2 = keys[i, 2] - sources[j, 2]
            if d0 * d0 + d1 * d1 + d2 * d2 < sq_radii[i]:
                cols[pos] = j
                pos += 1
    return offsets, cols


@njit(cache=True)
def knn_brute(keys, sources, k):
    m, n = keys.shape[0], sources.shape[0]
    cols = np.empty(m * k, dtype=np.int64)
    d = np.empty(n)
    for i in range(m):
        for j in range(n):
            d0 = keys[i, 0] - sources[j, 0]
            d1 = keys[i, 1] - sources[j, 1]
            d2 = keys[i, 2] - sources[j, 2]
            d[j] = d0 * d0 + d1 * d1 + d2 * d2
        # mergesort is stable: equal distances keep ascending source index
        order = np.argsort(d, kind="mergesort")
        chosen = np.sort(order[:k])
        cols[i * k:(i + 1) * k] = chosen
    offsets = np.arange(m + 1, dtype=np.int64) * k
    return offsets, cols


@njit(cache=True)
def _box_sq_dist(q, lo, hi):
    s = 0.0
    for a in range(3):
        if q[a] < lo[a]:
            t = lo[a] - q[a]
            s += t * t
        elif q[a] > hi[a]:
            t = q[a] - hi[a]
            s += t * t
    return s


@njit(cache=True)
def kdtree_ball(points, perm, node_lo, node_hi, node_start, node_end,
                node_left, node_right, keys, sq_radii):
    m = keys.shape[0]
    counts = np.zeros(m + 1, dtype=np.int64)
    buf = np.empty(points.shape[0], dtype=np.int64)
    stack = np.empty(128, dtype=np.int64)
    rows = []
    for i in range(m):
        q = keys[i]
        r2 = sq_radii[i]
        c = 0
        top = 0
        stack[top] = 0
        top += 1
        while top > 0:
            top -= 1
            node = stack[top]
            if _box_sq_dist(q, node_lo[node], node_hi[node]) >= r2:
                continue
            if node_left[node] < 0:
                for p in range(node_start[node], node_end[node]):
                    j = perm[p]
                    d0 = q[0] - points[j, 0]
                    d1 = q[1] - points[j, 1]
                    d2 = q[2] - points[j, 2]
                    if d0 * d0 + d1 * d1 + d2 * d2 < r2:
                        buf[c] = j
                        c += 1
            else:
                stack[top] = node_left[node]
                stack[top + 1] = node_right[node]
                top += 2
        row = np.sort(buf[:c])
        rows.append(row)
        counts[i + 1] = c
    offsets = np.cumsum(counts)
    cols = np.empty(offsets[m], dtype=np.int64)
    for i in range(m):
        cols[offsets[i]:offsets[i + 1]] = rows[i]
    return offsets, cols


@njit(cache=True)
def kdtree_knn(points, perm, node_lo, node_hi, node_start, node_end,
               node_left, node_right, keys, k):
    m = keys.shape[0]
    cols = np.empty(m * k, dtype=np.int64)
    best_d = np.empty(k)
    best_i = np.empty(k, dtype=np.int64)
    stack = np.empty(128, dtype=np.int64)
    for i in range(m):
        q = keys[i]
        filled = 0
        top = 0
        stack[top] = 0
        top += 1
        while top > 0:
            top -= 1
            node = stack[top]
            bd = _box_sq_dist(q, node_lo[node], node_hi[node])
            # equal distance can still win on the index tie-break
            if filled == k and bd > best_d[k - 1]:
                continue
            if node_left[node] < 0:
                for p in range(node_start[node], node_end[node]):
                    j = perm[p]
                    d0 = q[0] - points[j, 0]
                    d1 = q[1] - points[j, 1]
                    d2 = q[2] - points[j, 2]
                    dd = d0 * d0 + d1 * d1 + d2 * d2
                    if filled == k:
                        wd = best_d[k - 1]
                        if dd > wd or (dd == wd and j > best_i[k - 1]):
                            continue
                        pos = k - 1
                    else:
                        pos = filled
                        filled += 1
                    while pos > 0 and (best_d[pos - 1] > dd or
                                       (best_d[pos - 1] == dd and best_i[pos - 1] > j)):
                        best_d[pos] = best_d[pos - 1]
                        best_i[pos] = best_i[pos - 1]
                        pos -= 1
                    best_d[pos] = dd
                    best_i[pos] = j
            else:
                left, right = node_left[node], node_right[node]
                # push the farther child first so the nearer one is popped next
                dl = _box_sq_dist(q, node_lo[left], node_hi[left])
                dr = _box_sq_dist(q, node_lo[right], node_hi[right])
                if dl <= dr:
                    stack[top] = right
                    stack[top + 1] = left
                else:
                    stack[top] = left
                    stack[top + 1] = right
                top += 2
        cols[i * k:(i + 1) * k] = np.sort(best_i)
    offsets = np.arange(m + 1, dtype=np.int64) * k
    return offsets, cols


@njit(cache=True)
def spmm(offsets, cols, weights, x):
    m = offsets.shape[0] - 1
    d = x.shape[1]
    out = np.zeros((m, d))
    for i in range(m):
        for e in range(offsets[i], offsets[i + 1]):
            w = weights[e]
            j = cols[e]
            for c in range(d):
                out[i, c] += w * x[j, c]
    return out


@njit(cache=True)
def spmm_transpose(offsets, cols, weights, g, num_sources):
    m = offsets.shape[0] - 1
    d = g.shape[1]
    out = np.zeros((num_sources, d))
    for i in range(m):
        for e in range(offsets[i], offsets[i + 1]):
            w = weights[e]
            j = cols[e]
            for c in range(d):
                out[j, c] += w * g[i, c]
    return out


@njit(cache=True)
def edge_dot(rows, cols, q, k):
    n_edges = rows.shape[0]
    d = q.shape[1]
    out = np.empty(n_edges)
    for e in range(n_edges):
        i, j = rows[e], cols[e]
        s = 0.0
        for c in range(d):
            s += q[i, c] * k[j, c]
        out[e] = s
    return out


@njit(cache=True)
def segment_sum(offsets, values):
    m = offsets.shape[0] - 1
    out = np.zeros((m,) + values.shape[1:])
    for i in range(m):
        for e in range(offsets[i], offsets[i + 1]):
            out[i] += values[e]
    return out


@njit(cache=True)
def segment_softmax(offsets, values):
    m = offsets.shape[0] - 1
    out = np.empty_like(values)
    for i in range(m):
        lo, hi = offsets[i], offsets[i + 1]
        if hi == lo:
            continue
        mx = values[lo]
        for e in range(lo + 1, hi):
            if values[e] > mx:
                mx = values[e]
        s = 0.0
        for e in range(lo, hi):
            out[e] = math.exp(values[e] - mx)
            s += out[e]
        for e in range(lo, hi):
            out[e] /= s
    return out


@njit(cache=True)
def segment_max(offsets, x):
    m = offsets.shape[0] - 1
    d = x.shape[1]
    out = np.zeros((m, d))
    arg = np.full((m, d), -1, dtype=np.int64)
    for i in range(m):
        lo, hi = offsets[i], offsets[i + 1]
        if hi == lo:
            continue
        for c in range(d):
            best = x[lo, c]
            bi = lo
            for r in range(lo + 1, hi):
                # strict '>' keeps the first maximal row
                if x[r, c] > best:
                    best = x[r, c]
                    bi = r
            out[i, c] = best
            arg[i, c] = bi
    return out, arg


@njit(cache=True)
def scatter_add(index, values, n):
    out = np.zeros((n,) + values.shape[1:])
    for e in range(index.shape[0]):
        out[index[e]] += values[e]
    return out
