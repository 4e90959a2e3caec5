"""Estimate how many novel classes a batch holds with anchored k-means."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .memory import ExemplarStore
from .metrics import clustering_accuracy
from .model import EncoderParams, encode

N_INIT = 10


@dataclass
class SemiKMeansResult:
    free_assign: np.ndarray
    anchored_assign: np.ndarray
    centroids: np.ndarray
    anchor_labels: np.ndarray
    n_iter: int
    wcss: list = field(default_factory=list)


def _sqdist_to_nearest(points, centroids):
    if len(centroids) == 0:
        return np.full(len(points), np.inf)
    return _kernels.nearest(points, centroids)[1]


def semi_kmeans(points, anchored_points, anchored_labels, k_total: int, seed: int = 0,
                max_iter: int = 100, n_init: int = 1) -> SemiKMeansResult:
    """Lloyd iterations where anchored points never leave their labeled cluster.

    Clusters ``0..A-1`` belong to the sorted distinct anchor labels, the rest
    are free. Free centroids are seeded farthest-point first from the anchored
    centroids; a free cluster that empties is re-seeded at the free point
    farthest from every centroid. With ``n_init > 1`` the extra starts seed
    free centroids by D^2 sampling and the run with the lowest final
    within-cluster sum of squares wins (the farthest-point run on ties).
    """
    if n_init < 1:
        raise ValueError("n_init must be >= 1")
    best = None
    for r in range(n_init):
        res = _semi_kmeans_once(points, anchored_points, anchored_labels, k_total, [seed, r], max_iter, r > 0)
        if best is None or res.wcss[-1] < best.wcss[-1]:
            best = res
    return best


def _semi_kmeans_once(points, anchored_points, anchored_labels, k_total, seed, max_iter, sampled):
    free = np.asarray(points, dtype=np.float64)
    anc = np.asarray(anchored_points, dtype=np.float64)
    anc_y = np.asarray(anchored_labels, dtype=np.int64)
    dim = next((a.shape[-1] for a in (free, anc) if a.ndim == 2), 1)
    free = np.ascontiguousarray(free.reshape(len(free), dim))
    anc = np.ascontiguousarray(anc.reshape(len(anc_y), dim))
    labels, anc_assign = np.unique(anc_y, return_inverse=True)
    n_anchor = len(labels)
    if k_total < n_anchor:
        raise ValueError(f"k_total={k_total} is smaller than the {n_anchor} anchored labels")
    if k_total < 1:
        raise ValueError("k_total must be >= 1")
    anc_assign = anc_assign.astype(np.int64)
    rng = np.random.default_rng(seed)

    cents = np.zeros((k_total, dim))
    for a in range(n_anchor):
        cents[a] = anc[anc_assign == a].mean(axis=0)
    pool = free if len(free) else anc
    for c in range(n_anchor, k_total):
        if c == 0:
            cents[c] = pool[rng.integers(len(pool))]
            continue
        d = _sqdist_to_nearest(pool, cents[:c])
        if sampled and d.sum() > 0:
            cents[c] = pool[rng.choice(len(pool), p=d / d.sum())]
        else:
            cents[c] = pool[int(np.argmax(d))]

    assign = np.full(len(free), -1, dtype=np.int64)
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        new_assign = _kernels.nearest(free, cents)[0] if len(free) else assign
        for c in range(n_anchor, k_total):
            if len(free) and not (new_assign == c).any():
                counts = np.bincount(new_assign, minlength=k_total)
                movable = counts[new_assign] > 1
                if not movable.any():
                    continue
                d = _sqdist_to_nearest(free, cents)
                d[~movable] = -1.0
                p = int(np.argmax(d))
                new_assign[p] = c
                cents[c] = free[p]
        for c in range(k_total):
            members = free[new_assign == c]
            if c < n_anchor:
                members = np.vstack([anc[anc_assign == c], members])
            if len(members):
                cents[c] = members.mean(axis=0)
        wcss = float(((free - cents[new_assign]) ** 2).sum()) if len(free) else 0.0
        wcss += float(((anc - cents[anc_assign]) ** 2).sum()) if len(anc) else 0.0
        history.append(wcss)
        stable = np.array_equal(new_assign, assign)
        assign = new_assign
        if stable:
            break
    return SemiKMeansResult(assign, anc_assign, cents, labels, it, history)


def _probe_split(class_ids, fraction: float, seed: int):
    ids = np.asarray(sorted(class_ids), dtype=np.int64)
    n_probe = min(len(ids), max(1, int(round(fraction * len(ids)))))
    perm = np.random.default_rng(seed).permutation(len(ids))
    probe = np.sort(ids[perm[:n_probe]])
    return probe, np.setdiff1d(ids, probe)


def novel_count_scores(batch_embeddings, store: ExemplarStore, encoder: EncoderParams, k_range,
                       seed: int = 0, probe_fraction: float = 0.5, n_init: int = N_INIT) -> dict:
    """Exemplar clustering accuracy for every candidate novel-class count.

    Part of the known classes (``probe_fraction``) is withheld from anchoring
    and clustered like the batch; the others stay anchored. Accuracy is the
    Hungarian-matched agreement of all exemplars with their stored labels.
    """
    candidates = sorted(set(int(k) for k in k_range))
    if not candidates or candidates[0] < 1:
        raise ValueError("candidate range must be non-empty and positive")
    ex_x, ex_y = store.exemplar_arrays()
    if len(ex_y) == 0:
        raise ValueError("count estimation needs exemplars")
    ex_z = encode(encoder, ex_x)
    batch = np.atleast_2d(np.asarray(batch_embeddings, dtype=np.float64))
    probe_ids, anchor_ids = _probe_split(store.class_ids(), probe_fraction, seed)
    is_probe = np.isin(ex_y, probe_ids)
    free = np.vstack([batch, ex_z[is_probe]])
    n_batch = len(batch)

    scores = {}
    for k in candidates:
        res = semi_kmeans(free, ex_z[~is_probe], ex_y[~is_probe], len(anchor_ids) + len(probe_ids) + k, seed,
                          n_init=n_init)
        pred = np.empty(len(ex_y), dtype=np.int64)
        pred[~is_probe] = res.anchored_assign
        pred[is_probe] = res.free_assign[n_batch:]
        scores[k] = clustering_accuracy(pred, ex_y)
    return scores


def estimate_novel_count(batch_embeddings, store: ExemplarStore, encoder: EncoderParams, k_range,
                         seed: int = 0, probe_fraction: float = 0.5, n_init: int = N_INIT) -> int:
    """Candidate with the best exemplar accuracy; ties go to the smallest."""
    scores = novel_count_scores(batch_embeddings, store, encoder, k_range, seed, probe_fraction, n_init)
    best, best_acc = None, -1.0
    for k in sorted(scores):
        if scores[k] > best_acc:
            best, best_acc = k, scores[k]
    return best
