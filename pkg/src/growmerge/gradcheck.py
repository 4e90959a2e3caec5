"""Finite-difference verification of every loss gradient on random small models."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .model import BranchPair, ClusterHeadParams, EncoderParams, LossInputs, LossWeights, gradient_check

TOLERANCE = 1e-4

VARIANTS = {
    "bce": LossWeights(1.0, 0.0, 0.0, 0.0),
    "sd": LossWeights(0.0, 1.0, 0.0, 0.0),
    "pll": LossWeights(0.0, 0.0, 1.0, 0.0),
    "mse": LossWeights(0.0, 0.0, 0.0, 1.0),
}


def random_case(rng: np.random.Generator):
    """A small branch pair with a perturbed dynamic branch and inputs for every loss."""
    d_in = int(rng.integers(2, 5))
    hidden = [int(h) for h in rng.integers(3, 7, size=rng.integers(0, 2))]
    d_out = int(rng.integers(3, 6))
    static = EncoderParams.init([d_in, *hidden, d_out], rng)
    dynamic = static.copy()
    for arr in dynamic.arrays():
        arr += rng.normal(0.0, 0.1, size=arr.shape)
    k = int(rng.integers(2, 4))
    pair = BranchPair(static, dynamic, ClusterHeadParams.init(k, d_out, rng))

    n = int(rng.integers(3, 7))
    sim = (rng.random((n, n)) < 0.4).astype(np.float64)
    sim = np.maximum(sim, sim.T)
    np.fill_diagonal(sim, 1.0)
    n_cls = int(rng.integers(2, 4))
    protos = rng.normal(size=(n_cls, d_out))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    m = int(rng.integers(3, 7))
    x_mse = rng.normal(size=(n, d_in))
    ctx = LossInputs(
        bce_x=rng.normal(size=(n, d_in)), similarity=sim,
        sd_x=rng.normal(size=(n, d_in)),
        pll_x=rng.normal(size=(m, d_in)), pll_labels=rng.integers(0, n_cls, size=m), prototypes=protos,
        tau=float(rng.uniform(0.1, 1.0)),
        mse_x=x_mse, mse_x_aug=x_mse + rng.normal(0.0, 0.1, size=x_mse.shape),
    )
    return pair, ctx


@dataclass
class GradcheckReport:
    n_models: int
    worst: dict = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(v < TOLERANCE for v in self.worst.values())


def run_suite(n_models: int = 100, seed: int = 0) -> GradcheckReport:
    """Check each loss alone and a randomly weighted sum on ``n_models`` random models."""
    rng = np.random.default_rng(seed)
    report = GradcheckReport(n_models, {name: 0.0 for name in [*VARIANTS, "weighted_sum"]})
    start = time.perf_counter()
    for _ in range(n_models):
        pair, ctx = random_case(rng)
        for name, w in VARIANTS.items():
            report.worst[name] = max(report.worst[name], gradient_check(pair, ctx, w))
        mixed = LossWeights(*rng.uniform(0.2, 2.0, size=4))
        report.worst["weighted_sum"] = max(report.worst["weighted_sum"], gradient_check(pair, ctx, mixed))
    report.seconds = time.perf_counter() - start
    return report
