"""Merging phase: sample sifting, category unification, PLL training, branch EMA."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .grow import minibatches, wta_matrix
from .memory import ExemplarStore, Prototype, herd_exemplars, rebalance_budget
from .model import BranchPair, EncoderParams, LossInputs, LossWeights, OptState, ema_merge, encode, objective, sgd_step
from .numeric import l2_normalize

log = logging.getLogger(__name__)


@dataclass
class MergeConfig:
    sift_j: int = 15
    sift_fraction: float = 0.5
    tau: float = 0.1
    epochs: int = 50
    alpha: float = 0.99
    batch_size: int = 128
    wta_k: int = 5
    use_mse: bool = False
    augment_sigma: float = 0.05
    sd_on_exemplars: bool = True

    def __post_init__(self):
        if self.sift_j < 1:
            raise ValueError("sift_j must be >= 1")
        if not 0.0 <= self.sift_fraction < 1.0:
            raise ValueError("sift_fraction must lie in [0, 1)")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.epochs < 0 or self.batch_size < 2:
            raise ValueError("epochs must be >= 0 and batch_size >= 2")


def local_density(embeddings, j: int) -> np.ndarray:
    """Squared distance from each row to its j-th nearest other row.

    With fewer than j neighbours the farthest available one is used; a lone
    sample gets 0.
    """
    emb = np.ascontiguousarray(np.atleast_2d(embeddings), dtype=np.float64)
    return _kernels.kth_neighbor(emb, int(j))


def sift_samples(embeddings, labels, j: int = 15, fraction: float = 0.5) -> np.ndarray:
    """Keep-mask after dropping the sparsest ``ceil(fraction * n)`` samples per class.

    Sparsity is the local density score; among equal scores the sample that
    comes later in the input is removed first.
    """
    emb = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    if j < 1:
        raise ValueError("j must be >= 1")
    if not 0.0 <= fraction < 1.0:
        raise ValueError("fraction must lie in [0, 1)")
    keep = np.ones(len(labels), dtype=bool)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        n_drop = math.ceil(fraction * len(idx) - 1e-9)
        if n_drop == 0:
            continue
        g = local_density(emb[idx], j)
        order = np.lexsort((-idx, -g))
        keep[idx[order[:n_drop]]] = False
        if n_drop >= len(idx):
            log.warning("pseudo-class %d emptied by sifting and dropped", int(c))
    return keep


def unify_categories(encoder: EncoderParams, sifted_x, pseudo_labels, store: ExemplarStore,
                     timestep: int) -> ExemplarStore:
    """Add one class per distinct pseudo-label to ``store``.

    Pseudo-labels are mapped, in ascending order, to fresh class ids after the
    largest stored id. Each new class gets herded exemplars and a prototype
    from its sifted samples; the store is then rebalanced to its budget.
    """
    x = np.atleast_2d(np.asarray(sifted_x, dtype=np.float64))
    pseudo = np.asarray(pseudo_labels, dtype=np.int64)
    if len(pseudo) == 0:
        raise ValueError("no sifted samples to unify")
    groups = np.unique(pseudo)
    quota = store.budget // (len(store) + len(groups))
    if quota < 1:
        raise ValueError(f"budget {store.budget} too small for {len(store) + len(groups)} classes")
    next_id = store.next_class_id()
    for offset, g in enumerate(groups):
        members = x[pseudo == g]
        cid = next_id + offset
        mu = l2_normalize(encode(encoder, members).mean(axis=0))
        store.add_class(cid, herd_exemplars(members, encoder, quota), timestep,
                        Prototype(cid, mu, len(members)))
    return rebalance_budget(store)


def _exemplar_targets(store: ExemplarStore, encoder: EncoderParams):
    ids, protos = store.prototype_matrix(encoder)
    x, y = store.exemplar_arrays()
    row = {int(c): i for i, c in enumerate(ids)}
    usable = np.array([int(c) in row for c in y], dtype=bool)
    labels = np.array([row[int(c)] for c in y[usable]], dtype=np.int64)
    return x[usable], labels, protos


def run_merging(pair: BranchPair, store: ExemplarStore, novel_x, cfg: MergeConfig, weights: LossWeights,
                opt: OptState, seed) -> list:
    """Tighten the dynamic branch on all classes with PLL, BCE and distillation.

    Prototypes are refreshed from the exemplars at the start of every epoch.
    """
    if not len(store):
        raise ValueError("merging needs at least one class in the store")
    rng = np.random.default_rng(seed)
    novel = None if novel_x is None else np.atleast_2d(np.asarray(novel_x, dtype=np.float64))
    use_pairs = pair.head is not None and novel is not None and len(novel) >= 2
    bce_w = weights if use_pairs else LossWeights(0.0, weights.sd, weights.pll, weights.mse)
    history = []
    for _ in range(cfg.epochs):
        ex_x, ex_y, protos = _exemplar_targets(store, pair.dynamic)
        batches = minibatches(len(novel), cfg.batch_size, rng) if use_pairs else [None]
        sums = {"total": 0.0, "bce": 0.0, "sd": 0.0, "pll": 0.0, "mse": 0.0}
        for idx in batches:
            ctx = LossInputs(pll_x=ex_x, pll_labels=ex_y, prototypes=protos, tau=cfg.tau)
            xb = novel[idx] if idx is not None else None
            if use_pairs:
                ctx.bce_x = xb
                ctx.similarity = wta_matrix(encode(pair.dynamic, xb), min(cfg.wta_k, pair.dynamic.output_dim))
            ctx.sd_x = ex_x if (cfg.sd_on_exemplars or xb is None) else xb
            if cfg.use_mse:
                src = xb if xb is not None else ex_x
                ctx.mse_x = src
                ctx.mse_x_aug = src + rng.normal(0.0, cfg.augment_sigma, size=src.shape)
            total, parts, grads = objective(pair, ctx, bce_w)
            sgd_step(opt, pair.trainable(), grads.as_list())
            sums["total"] += total
            for key in ("bce", "sd", "pll", "mse"):
                sums[key] += parts[key]
        opt.end_epoch()
        history.append({k: v / len(batches) for k, v in sums.items()})
    return history


def unify_branches(pair: BranchPair, alpha: float) -> BranchPair:
    """EMA the dynamic branch toward the (never modified) static branch."""
    pair.dynamic = ema_merge(pair.static, pair.dynamic, alpha)
    return pair
