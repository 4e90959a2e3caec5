"""Growing phase: novelty detection and pairwise-similarity clustering."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .memory import ExemplarStore
from .model import BranchPair, EncoderParams, LossInputs, LossWeights, OptState, encode, objective, sgd_step
from .numeric import COSINE, pairwise_distance


@dataclass
class GrowConfig:
    epsilon: float = 0.6
    wta_k: int = 5
    epochs: int = 50
    augment_sigma: float = 0.05
    batch_size: int = 128
    metric: str = COSINE

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.wta_k < 1:
            raise ValueError("wta_k must be >= 1")
        if self.epochs < 0 or self.batch_size < 2:
            raise ValueError("epochs must be >= 0 and batch_size >= 2")


def novelty_distance(x, store: ExemplarStore, dynamic: EncoderParams, metric: str = COSINE) -> np.ndarray:
    """Distance from each embedded row of ``x`` to its nearest prototype."""
    if not len(store):
        raise ValueError("novelty detection needs at least one known class")
    _, mus = store.prototype_matrix(dynamic)
    z = np.atleast_2d(encode(dynamic, x))
    return pairwise_distance(z, mus, metric).min(axis=1)


def detect_novelty(x, store: ExemplarStore, dynamic: EncoderParams, epsilon: float, metric: str = COSINE):
    """Split rows of ``x`` into (novel, known) index arrays; novel iff distance > epsilon."""
    d = novelty_distance(x, store, dynamic, metric)
    novel = d > epsilon
    return np.flatnonzero(novel), np.flatnonzero(~novel)


def wta_similarity(z_i, z_j, k: int) -> int:
    """1 when both vectors have the same set of k largest channels."""
    z = np.vstack([np.asarray(z_i, dtype=np.float64), np.asarray(z_j, dtype=np.float64)])
    if k > z.shape[1]:
        raise ValueError(f"k={k} exceeds dimension {z.shape[1]}")
    codes = _kernels.wta_codes(np.ascontiguousarray(z), int(k))
    return int(np.array_equal(codes[0], codes[1]))


def wta_matrix(z, k: int) -> np.ndarray:
    z = np.ascontiguousarray(np.atleast_2d(z), dtype=np.float64)
    if k > z.shape[1]:
        raise ValueError(f"k={k} exceeds dimension {z.shape[1]}")
    return _kernels.wta_matrix(z, int(k))


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> list:
    """Shuffled index chunks; a trailing singleton is folded into the previous chunk."""
    perm = rng.permutation(n)
    chunks = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        tail = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], tail])
    return chunks


def run_growing(pair: BranchPair, novel_x, cfg: GrowConfig, weights: LossWeights, opt: OptState,
                seed, sd_pool=None) -> list:
    """Train the dynamic branch and cluster head on detected novel samples.

    Minimizes the weighted pairwise BCE, static-dynamic distillation and noise
    consistency losses. Distillation runs over ``sd_pool`` (normally the whole
    incoming batch), split into as many shuffled chunks as there are novel
    minibatches; without a pool it uses the novel minibatch itself. Returns
    one dict of mean loss parts per epoch.
    """
    x = np.atleast_2d(np.asarray(novel_x, dtype=np.float64))
    if x.shape[0] < 2:
        raise ValueError(
            f"growing needs at least 2 novel samples, got {x.shape[0]}; review the novelty threshold"
        )
    if pair.head is None:
        raise ValueError("growing needs a cluster head sized to this timestep's novel classes")
    pool = None if sd_pool is None else np.atleast_2d(np.asarray(sd_pool, dtype=np.float64))
    rng = np.random.default_rng(seed)
    history = []
    for _ in range(cfg.epochs):
        sums = {"total": 0.0, "bce": 0.0, "sd": 0.0, "mse": 0.0}
        batches = minibatches(x.shape[0], cfg.batch_size, rng)
        sd_chunks = None
        if pool is not None:
            sd_chunks = np.array_split(rng.permutation(len(pool)), len(batches))
        for b, idx in enumerate(batches):
            xb = x[idx]
            sd_x = pool[sd_chunks[b]] if sd_chunks is not None and len(sd_chunks[b]) else xb
            sim = wta_matrix(encode(pair.dynamic, xb), min(cfg.wta_k, pair.dynamic.output_dim))
            x_aug = xb + rng.normal(0.0, cfg.augment_sigma, size=xb.shape)
            ctx = LossInputs(bce_x=xb, similarity=sim, sd_x=sd_x, mse_x=xb, mse_x_aug=x_aug)
            total, parts, grads = objective(pair, ctx, weights)
            sgd_step(opt, pair.trainable(), grads.as_list())
            sums["total"] += total
            for key in ("bce", "sd", "mse"):
                sums[key] += parts[key]
        opt.end_epoch()
        history.append({k: v / len(batches) for k, v in sums.items()})
    return history
