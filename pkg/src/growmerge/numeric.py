"""Small dense primitives: normalization, distances, softmax, assignment."""
from __future__ import annotations

import numpy as np

from . import _kernels

NORM_EPS = 1e-12
SQEUCLIDEAN = "sqeuclidean"
COSINE = "cosine"
METRICS = (SQEUCLIDEAN, COSINE)


def l2_normalize(v):
    """Scale ``v`` (or each row of a 2-D array) to unit L2 norm.

    Rows with norm below 1e-12 are returned unchanged.
    """
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    safe = norm >= NORM_EPS
    return np.where(safe, v / np.where(safe, norm, 1.0), v)


def _check_metric(kind):
    if kind not in METRICS:
        raise ValueError(f"unknown metric {kind!r}; expected one of {METRICS}")


def distance(a, b, kind=COSINE):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_metric(kind)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if kind == SQEUCLIDEAN:
        d = a - b
        return float(d @ d)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < NORM_EPS or nb < NORM_EPS:
        raise ValueError("cosine distance undefined for a zero vector")
    ua, ub = a / na, b / nb
    if np.array_equal(ua, ub):
        return 0.0
    cos = float(np.dot(ua, ub))
    return float(min(2.0, max(0.0, 1.0 - cos)))


def pairwise_distance(x, y, kind=COSINE):
    """Distance matrix between the rows of ``x`` and the rows of ``y``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    _check_metric(kind)
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    if kind == SQEUCLIDEAN:
        diff = x[:, None, :] - y[None, :, :]
        return np.einsum("ijd,ijd->ij", diff, diff)
    nx = np.linalg.norm(x, axis=1)
    ny = np.linalg.norm(y, axis=1)
    if (nx < NORM_EPS).any() or (ny < NORM_EPS).any():
        raise ValueError("cosine distance undefined for a zero vector")
    cos = (x / nx[:, None]) @ (y / ny[:, None]).T
    return np.clip(1.0 - cos, 0.0, 2.0)


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def hungarian_assign(costs):
    """Minimum-cost perfect assignment of a square cost matrix.

    Returns ``(assignment, total_cost)`` where ``assignment[r]`` is the column
    given to row ``r``. Among optimal assignments the lexicographically
    smallest one is returned, so results are reproducible under ties.
    Rectangular problems must be padded by the caller.
    """
    c = np.asarray(costs, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] < 1 or c.shape[1] < 1:
        raise ValueError("cost matrix must be a non-empty 2-D array")
    if c.shape[0] != c.shape[1]:
        raise ValueError(f"cost matrix must be square, got {c.shape}; pad it first")
    if not np.isfinite(c).all():
        raise ValueError("cost matrix contains non-finite entries")
    n = c.shape[0]
    row4col, u, v = _kernels.hungarian(np.ascontiguousarray(c))
    col4row = np.empty(n, dtype=np.int64)
    col4row[row4col] = np.arange(n)

    reduced = c - u[:, None] - v[None, :]
    tol = 1e-10 * (1.0 + np.abs(c).max())
    tight = reduced <= tol
    col4row = _kernels.lexmin_tight(np.ascontiguousarray(tight), col4row)
    total = float(c[np.arange(n), col4row].sum())
    return col4row, total


def pad_square(m, fill=0.0):
    m = np.asarray(m, dtype=np.float64)
    n = max(m.shape)
    out = np.full((n, n), fill)
    out[: m.shape[0], : m.shape[1]] = m
    return out
