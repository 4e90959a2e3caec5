"""Hot inner loops, compiled with numba when available.

Every kernel has two implementations with identical semantics: a loop form
written in the numba nopython subset, and a vectorized numpy form. Set
``GROWMERGE_PURE_NUMPY=1`` to force the numpy path (also used automatically
when numba cannot be imported). Both variants are importable under explicit
``*_numba`` / ``*_numpy`` names so tests and the benchmark can compare them.
"""
from __future__ import annotations

import logging
import os

import numpy as np

log = logging.getLogger(__name__)

_FLAG = "GROWMERGE_PURE_NUMPY"

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


USE_NUMBA = HAVE_NUMBA and os.environ.get(_FLAG, "").strip().lower() not in ("1", "true", "yes")


# --------------------------------------------------------------------------
# Hungarian (shortest augmenting path with potentials, O(n^3))
# --------------------------------------------------------------------------


def _hungarian_loop(cost):
    n = cost.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=np.bool_)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    row4col = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        row4col[j - 1] = p[j] - 1
    return row4col, u[1:].copy(), v[1:].copy()


def _hungarian_vec(cost):
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            upd = free & (cur < minv[1:])
            minv[1:][upd] = cur[upd]
            way[1:][upd] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    return p[1:] - 1, u[1:].copy(), v[1:].copy()


def _lexmin_loop(tight, row_col):
    """Lexicographically smallest perfect matching within the tight-edge graph.

    ``row_col`` must already be a perfect matching that uses tight edges only.
    Each row in turn tries its smallest tight column; the displaced holder is
    re-routed by a Kuhn-style DFS over rows not yet fixed.
    """
    n = tight.shape[0]
    row_col = row_col.copy()
    col_owner = np.full(n, -1, dtype=np.int64)
    for r in range(n):
        col_owner[row_col[r]] = r
    adj = tight.copy()
    stack_r = np.empty(n + 1, dtype=np.int64)
    stack_c = np.empty(n + 1, dtype=np.int64)
    parent_col = np.empty(n + 1, dtype=np.int64)
    for r in range(n):
        for c in range(n):
            if not adj[r, c]:
                continue
            if row_col[r] == c:
                break
            holder = col_owner[c]
            if holder < r:
                continue
            # r takes c; the displaced holder must re-route among rows > r
            saved_rc = row_col.copy()
            saved_co = col_owner.copy()
            col_owner[row_col[r]] = -1
            row_col[r] = c
            col_owner[c] = r
            row_col[holder] = -1
            seen = np.zeros(n, dtype=np.bool_)
            for rr in range(r):
                seen[row_col[rr]] = True
            seen[c] = True
            # iterative DFS from holder over tight edges, avoiding column c
            found = False
            depth = 0
            stack_r[0] = holder
            stack_c[0] = 0
            while depth >= 0 and not found:
                rr = stack_r[depth]
                advanced = False
                cc = stack_c[depth]
                while cc < n:
                    if adj[rr, cc] and not seen[cc] and cc != c:
                        seen[cc] = True
                        stack_c[depth] = cc + 1
                        parent_col[depth] = cc
                        owner = col_owner[cc]
                        if owner < 0:
                            for d in range(depth, -1, -1):
                                col_owner[parent_col[d]] = stack_r[d]
                                row_col[stack_r[d]] = parent_col[d]
                            found = True
                        else:
                            depth += 1
                            stack_r[depth] = owner
                            stack_c[depth] = 0
                            advanced = True
                        break
                    cc += 1
                if not advanced and not found:
                    depth -= 1
            if found:
                break
            row_col[:] = saved_rc
            col_owner[:] = saved_co
        for c in range(n):
            if c != row_col[r]:
                adj[r, c] = False
    return row_col


# --------------------------------------------------------------------------
# Herding
# --------------------------------------------------------------------------


HERD_TIE_RTOL = 1e-12


def _herding_loop(emb, m):
    n, d = emb.shape
    mu = np.zeros(d)
    for i in range(n):
        for k in range(d):
            mu[k] += emb[i, k]
    for k in range(d):
        mu[k] /= n
    chosen = np.zeros(n, dtype=np.bool_)
    running = np.zeros(d)
    order = np.empty(m, dtype=np.int64)
    score = np.empty(n)
    for step in range(m):
        inv = 1.0 / (step + 1)
        low = np.inf
        for i in range(n):
            if chosen[i]:
                score[i] = np.inf
                continue
            acc = 0.0
            for k in range(d):
                diff = mu[k] - (running[k] + emb[i, k]) * inv
                acc += diff * diff
            score[i] = acc
            if acc < low:
                low = acc
        # scores within rounding of the minimum count as ties -> lowest index
        cut = low + HERD_TIE_RTOL * (1.0 + low)
        best = 0
        for i in range(n):
            if score[i] <= cut:
                best = i
                break
        chosen[best] = True
        order[step] = best
        for k in range(d):
            running[k] += emb[best, k]
    return order


def _herding_vec(emb, m):
    n = emb.shape[0]
    mu = emb.sum(axis=0) / n
    chosen = np.zeros(n, dtype=bool)
    running = np.zeros(emb.shape[1])
    order = np.empty(m, dtype=np.int64)
    for step in range(m):
        diff = mu - (running + emb) * (1.0 / (step + 1))
        score = np.einsum("ij,ij->i", diff, diff)
        score[chosen] = np.inf
        low = score.min()
        best = int(np.argmax(score <= low + HERD_TIE_RTOL * (1.0 + low)))
        chosen[best] = True
        order[step] = best
        running += emb[best]
    return order


# --------------------------------------------------------------------------
# Nearest centroid (squared euclidean, ties to lowest index)
# --------------------------------------------------------------------------


def _nearest_loop(points, centroids):
    n, d = points.shape
    k = centroids.shape[0]
    out = np.empty(n, dtype=np.int64)
    best_d = np.empty(n)
    for i in range(n):
        bi = 0
        bv = np.inf
        for c in range(k):
            acc = 0.0
            for t in range(d):
                diff = points[i, t] - centroids[c, t]
                acc += diff * diff
            if acc < bv:
                bv = acc
                bi = c
        out[i] = bi
        best_d[i] = bv
    return out, best_d


def _nearest_vec(points, centroids):
    diff = points[:, None, :] - centroids[None, :, :]
    dist = np.einsum("ikd,ikd->ik", diff, diff)
    idx = np.argmin(dist, axis=1)
    return idx.astype(np.int64), dist[np.arange(points.shape[0]), idx]


# --------------------------------------------------------------------------
# k-th nearest neighbour distance (squared euclidean, self excluded)
# --------------------------------------------------------------------------


def _kth_neighbor_loop(emb, j):
    n, d = emb.shape
    out = np.zeros(n)
    if n < 2:
        return out
    jj = min(j, n - 1)
    buf = np.empty(n - 1)
    for i in range(n):
        w = 0
        for o in range(n):
            if o == i:
                continue
            acc = 0.0
            for t in range(d):
                diff = emb[i, t] - emb[o, t]
                acc += diff * diff
            buf[w] = acc
            w += 1
        buf.sort()
        out[i] = buf[jj - 1]
    return out


def _kth_neighbor_vec(emb, j):
    n = emb.shape[0]
    if n < 2:
        return np.zeros(n)
    jj = min(j, n - 1)
    diff = emb[:, None, :] - emb[None, :, :]
    dist = np.einsum("ijd,ijd->ij", diff, diff)
    np.fill_diagonal(dist, np.inf)
    return np.partition(dist, jj - 1, axis=1)[:, jj - 1]


# --------------------------------------------------------------------------
# Winner-take-all codes and pairwise similarity
# --------------------------------------------------------------------------


def _wta_codes_loop(z, k):
    n, d = z.shape
    codes = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        order = np.argsort(-z[i], kind="mergesort")
        top = np.sort(order[:k])
        for t in range(k):
            codes[i, t] = top[t]
    return codes


def _same_code_loop(codes):
    n, k = codes.shape
    s = np.zeros((n, n))
    for i in range(n):
        s[i, i] = 1.0
        for j in range(i + 1, n):
            same = True
            for t in range(k):
                if codes[i, t] != codes[j, t]:
                    same = False
                    break
            if same:
                s[i, j] = 1.0
                s[j, i] = 1.0
    return s


def _wta_codes_vec(z, k):
    order = np.argsort(-z, axis=1, kind="stable")[:, :k]
    return np.sort(order, axis=1).astype(np.int64)


def _wta_matrix_vec(z, k):
    codes = _wta_codes_vec(z, k)
    return (codes[:, None, :] == codes[None, :, :]).all(axis=2).astype(np.float64)


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------

hungarian_numpy = _hungarian_vec
herding_numpy = _herding_vec
nearest_numpy = _nearest_vec
kth_neighbor_numpy = _kth_neighbor_vec
wta_codes_numpy = _wta_codes_vec
wta_matrix_numpy = _wta_matrix_vec
lexmin_tight_numpy = _lexmin_loop

if HAVE_NUMBA:
    hungarian_numba = njit(cache=True)(_hungarian_loop)
    herding_numba = njit(cache=True)(_herding_loop)
    nearest_numba = njit(cache=True)(_nearest_loop)
    kth_neighbor_numba = njit(cache=True)(_kth_neighbor_loop)
    wta_codes_numba = njit(cache=True)(_wta_codes_loop)
    _same_code_numba = njit(cache=True)(_same_code_loop)

    def wta_matrix_numba(z, k):
        return _same_code_numba(wta_codes_numba(z, k))

    lexmin_tight_numba = njit(cache=True)(_lexmin_loop)
else:  # pragma: no cover
    hungarian_numba = herding_numba = nearest_numba = None
    kth_neighbor_numba = wta_codes_numba = wta_matrix_numba = lexmin_tight_numba = None

if USE_NUMBA:
    hungarian = hungarian_numba
    herding = herding_numba
    nearest = nearest_numba
    kth_neighbor = kth_neighbor_numba
    wta_codes = wta_codes_numba
    wta_matrix = wta_matrix_numba
    lexmin_tight = lexmin_tight_numba
else:
    hungarian = hungarian_numpy
    herding = herding_numpy
    nearest = nearest_numpy
    kth_neighbor = kth_neighbor_numpy
    wta_codes = wta_codes_numpy
    wta_matrix = wta_matrix_numpy
    lexmin_tight = lexmin_tight_numpy
    if HAVE_NUMBA:
        log.info("%s set: using pure numpy kernels", _FLAG)

BACKEND = "numba" if USE_NUMBA else "numpy"
