"""Exemplar sets, prototypes and the nearest-prototype classifier."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels
from .model import EncoderParams, encode
from .numeric import COSINE, NORM_EPS, l2_normalize, pairwise_distance

log = logging.getLogger(__name__)

DEFAULT_BUDGET = 200


@dataclass
class Prototype:
    class_id: int
    mu: np.ndarray
    support: int

    @property
    def degenerate(self) -> bool:
        return float(np.linalg.norm(self.mu)) < NORM_EPS


@dataclass
class ClassMemory:
    """Raw exemplars of one class, kept in herding (priority) order."""

    samples: np.ndarray
    source_timestep: int = 0
    prototype: Optional[Prototype] = None


@dataclass
class ExemplarStore:
    input_dim: int
    budget: int = DEFAULT_BUDGET
    classes: dict = field(default_factory=dict)

    def class_ids(self) -> list:
        return sorted(self.classes)

    def total(self) -> int:
        return sum(len(c.samples) for c in self.classes.values())

    def __len__(self) -> int:
        return len(self.classes)

    def add_class(self, class_id: int, samples: np.ndarray, source_timestep: int,
                  prototype: Optional[Prototype] = None) -> None:
        samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
        if class_id < 0:
            raise ValueError("class ids must be non-negative")
        if samples.shape[1] != self.input_dim or samples.shape[0] == 0:
            raise ValueError(f"class {class_id}: bad exemplar array {samples.shape}")
        self.classes[int(class_id)] = ClassMemory(samples, int(source_timestep), prototype)

    def next_class_id(self) -> int:
        return max(self.classes) + 1 if self.classes else 0

    def refresh_prototypes(self, encoder: EncoderParams) -> None:
        for cid, mem in self.classes.items():
            mem.prototype = compute_prototype(mem.samples, encoder, class_id=cid)
            if mem.prototype.degenerate:
                log.warning("class %d has a degenerate (zero) prototype", cid)

    def prototype_matrix(self, encoder: Optional[EncoderParams] = None):
        """Ids and stacked prototypes of all non-degenerate classes, ascending id.

        Passing ``encoder`` refreshes the prototypes first.
        """
        if encoder is not None:
            self.refresh_prototypes(encoder)
        ids, mus = [], []
        for cid in self.class_ids():
            proto = self.classes[cid].prototype
            if proto is None:
                raise ValueError(f"class {cid} has no prototype; refresh with an encoder")
            if not proto.degenerate:
                ids.append(cid)
                mus.append(proto.mu)
        if not ids:
            raise ValueError("store has no usable prototype")
        return np.asarray(ids, dtype=np.int64), np.vstack(mus)

    def exemplar_arrays(self):
        """All exemplars stacked, with their class ids (ascending class order)."""
        xs, ys = [], []
        for cid in self.class_ids():
            s = self.classes[cid].samples
            xs.append(s)
            ys.append(np.full(len(s), cid, dtype=np.int64))
        if not xs:
            return np.zeros((0, self.input_dim)), np.zeros(0, dtype=np.int64)
        return np.vstack(xs), np.concatenate(ys)

    def copy(self) -> "ExemplarStore":
        out = ExemplarStore(self.input_dim, self.budget)
        for cid, mem in self.classes.items():
            out.classes[cid] = ClassMemory(mem.samples.copy(), mem.source_timestep, mem.prototype)
        return out


def herding_order(embeddings: np.ndarray, m: int) -> np.ndarray:
    """Indices chosen greedily so the running mean tracks the full mean."""
    emb = np.ascontiguousarray(np.atleast_2d(embeddings), dtype=np.float64)
    if emb.shape[0] == 0:
        raise ValueError("herding needs at least one sample")
    if m < 1:
        raise ValueError("herding needs m >= 1")
    return _kernels.herding(emb, min(int(m), emb.shape[0]))


def herd_exemplars(samples, encoder: EncoderParams, m: int) -> np.ndarray:
    """Select ``min(m, len(samples))`` raw samples in herding order."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if samples.shape[0] == 0 or samples.size == 0:
        raise ValueError("herding needs at least one sample")
    order = herding_order(encode(encoder, samples), m)
    return samples[order]


def compute_prototype(exemplars, encoder: EncoderParams, class_id: int = -1) -> Prototype:
    exemplars = np.atleast_2d(np.asarray(exemplars, dtype=np.float64))
    if exemplars.shape[0] == 0 or exemplars.size == 0:
        raise ValueError("a prototype needs at least one exemplar")
    mu = l2_normalize(encode(encoder, exemplars).mean(axis=0))
    return Prototype(class_id, mu, exemplars.shape[0])


def predict(store: ExemplarStore, encoder: EncoderParams, x, metric: str = COSINE) -> np.ndarray:
    """Nearest-prototype class for every row of ``x``; ties go to the lowest id."""
    if not len(store):
        raise ValueError("cannot classify with an empty exemplar store")
    ids, mus = store.prototype_matrix(encoder)
    z = np.atleast_2d(encode(encoder, x))
    dist = pairwise_distance(z, mus, metric)
    return ids[np.argmin(dist, axis=1)]


def classify_nearest_prototype(store: ExemplarStore, encoder: EncoderParams, x, metric: str = COSINE) -> int:
    return int(predict(store, encoder, np.atleast_2d(x), metric)[0])


def rebalance_budget(store: ExemplarStore, encoder: Optional[EncoderParams] = None) -> ExemplarStore:
    """Truncate every class to ``floor(budget / n_classes)`` exemplars.

    Herding order is a priority order, so truncation keeps the best ones.
    Prototypes of truncated classes are recomputed when ``encoder`` is given
    and cleared otherwise.
    """
    if not len(store):
        return store
    quota = store.budget // len(store)
    if quota < 1:
        raise ValueError(f"budget {store.budget} cannot hold one exemplar for each of {len(store)} classes")
    changed = False
    for mem in store.classes.values():
        if len(mem.samples) > quota:
            mem.samples = mem.samples[:quota]
            mem.prototype = None
            changed = True
    if changed:
        log.debug("rebalanced store to %d exemplars per class", quota)
    if encoder is not None:
        store.refresh_prototypes(encoder)
    return store
