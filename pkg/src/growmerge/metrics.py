"""Hungarian-matched clustering accuracy, forgetting and discovery metrics."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .memory import predict
from .numeric import hungarian_assign


def best_matching(pred, truth) -> dict:
    """Map predicted label -> true label maximizing agreement.

    Predicted labels left without a partner (more clusters than classes)
    are absent from the result and therefore never count as correct.
    """
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise ValueError("need at least one sample")
    p_vals, p_idx = np.unique(pred, return_inverse=True)
    t_vals, t_idx = np.unique(truth, return_inverse=True)
    n = max(len(p_vals), len(t_vals))
    counts = np.zeros((n, n))
    np.add.at(counts, (p_idx, t_idx), 1.0)
    assign, _ = hungarian_assign(counts.max() - counts)
    return {int(p_vals[r]): int(t_vals[c]) for r, c in enumerate(assign)
            if r < len(p_vals) and c < len(t_vals)}


def _hits(pred, truth, mapping) -> np.ndarray:
    mapped = np.array([mapping.get(int(p), np.iinfo(np.int64).min) for p in pred], dtype=np.int64)
    return mapped == np.asarray(truth, dtype=np.int64)


def clustering_accuracy(pred, truth) -> float:
    mapping = best_matching(pred, truth)
    return float(_hits(pred, truth, mapping).mean())


def split_accuracy(pred, truth, known_classes, novel_classes):
    """Accuracy on the known and novel subsets under one joint matching.

    Returns ``(acc_known, acc_novel)``; a subset with no samples yields None.
    """
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    hits = _hits(pred, truth, best_matching(pred, truth))
    known = np.isin(truth, list(known_classes))
    novel = np.isin(truth, list(novel_classes))
    acc_known = float(hits[known].mean()) if known.any() else None
    acc_novel = float(hits[novel].mean()) if novel.any() else None
    return acc_known, acc_novel


@dataclass
class TimestepRecord:
    t: int
    acc_known: float
    acc_novel: Optional[float] = None


@dataclass
class MetricsLedger:
    records: list = field(default_factory=list)
    m_f: Optional[float] = None
    m_d: Optional[float] = None

    def add(self, t: int, acc_known: float, acc_novel: Optional[float] = None) -> None:
        self.records.append(TimestepRecord(int(t), float(acc_known),
                                           None if acc_novel is None else float(acc_novel)))

    def record(self, t: int) -> Optional[TimestepRecord]:
        for r in self.records:
            if r.t == t:
                return r
        return None

    def finalize(self):
        self.m_f, self.m_d = finalize(self)
        return self.m_f, self.m_d


def finalize(ledger: MetricsLedger):
    """Maximum forgetting over t >= 1 and the final novel accuracy.

    Values are rounded to 12 decimals so float subtraction noise does not
    leak into reports; accuracies are count ratios, so nothing real is lost.
    ``m_f`` is 0 when there is no record after t=0.
    """
    first = ledger.record(0)
    if first is None:
        raise ValueError("ledger has no t=0 record")
    later = sorted((r for r in ledger.records if r.t > 0), key=lambda r: r.t)
    if not later:
        return 0.0, None
    m_f = round(max(first.acc_known - r.acc_known for r in later), 12)
    m_d = later[-1].acc_novel
    return m_f, (None if m_d is None else round(m_d, 12))


def evaluate_timestep(store, encoder, test, known_classes, novel_classes, metric: str = "cosine"):
    """Score nearest-prototype predictions on a cumulative test set.

    ``known_classes`` were introduced before this timestep and
    ``novel_classes`` at it; one matching over all test samples serves both.
    """
    if len(test) == 0:
        raise ValueError("empty test set")
    pred = predict(store, encoder, test.x, metric)
    return split_accuracy(pred, test.labels, known_classes, novel_classes)
