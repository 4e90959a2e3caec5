"""Two-branch encoder, cluster head, losses and their analytic gradients.

The encoder is a fully connected ReLU network whose linear output layer is
followed by L2 normalization. Gradients are derived by hand, including the
Jacobian of the normalization stage, and verified against central finite
differences by :func:`gradient_check`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .numeric import NORM_EPS, log_softmax, softmax

PROB_CLAMP = 1e-7


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------


@dataclass
class EncoderParams:
    weights: list
    biases: list

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("encoder needs one bias per weight matrix and at least one layer")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {l}: weight {w.shape} and bias {b.shape} do not fit")
            if l and w.shape[1] != self.weights[l - 1].shape[0]:
                raise ValueError(f"layer {l} input {w.shape[1]} != previous output {self.weights[l - 1].shape[0]}")

    @classmethod
    def init(cls, sizes: Sequence[int], rng: np.random.Generator) -> "EncoderParams":
        """He-initialized network with layer widths ``sizes`` (input first)."""
        ws, bs = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            ws.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in)))
            bs.append(np.zeros(fan_out))
        return cls(ws, bs)

    @property
    def sizes(self) -> list:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    def arrays(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "EncoderParams":
        return EncoderParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def same_shape(self, other: "EncoderParams") -> bool:
        return self.sizes == other.sizes


@dataclass
class ClusterHeadParams:
    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weight.ndim != 2 or self.weight.shape[0] < 1 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError(f"bad head shapes {self.weight.shape}, {self.bias.shape}")

    @classmethod
    def init(cls, k: int, dim: int, rng: np.random.Generator) -> "ClusterHeadParams":
        return cls(rng.normal(0.0, 1.0 / np.sqrt(dim), size=(k, dim)), np.zeros(k))

    @property
    def k(self) -> int:
        return self.weight.shape[0]

    def arrays(self) -> list:
        return [self.weight, self.bias]

    def copy(self) -> "ClusterHeadParams":
        return ClusterHeadParams(self.weight.copy(), self.bias.copy())


@dataclass
class BranchPair:
    static: EncoderParams
    dynamic: EncoderParams
    head: Optional[ClusterHeadParams] = None

    def __post_init__(self):
        if not self.static.same_shape(self.dynamic):
            raise ValueError("static and dynamic branches must have identical shapes")

    @classmethod
    def from_pretrained(cls, enc: EncoderParams) -> "BranchPair":
        return cls(enc.copy(), enc.copy())

    def trainable(self) -> list:
        arrs = self.dynamic.arrays()
        if self.head is not None:
            arrs += self.head.arrays()
        return arrs


@dataclass
class LossWeights:
    bce: float = 1.0
    sd: float = 1.0
    pll: float = 1.0
    mse: float = 1.0

    def __post_init__(self):
        for name in ("bce", "sd", "pll", "mse"):
            val = getattr(self, name)
            if not np.isfinite(val) or val < 0:
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {val}")


@dataclass
class LossInputs:
    """Inputs for one evaluation of the weighted objective.

    Any group left as ``None`` contributes nothing. ``pll_labels`` index rows
    of ``prototypes``; ``similarity`` is the pairwise target for ``bce_x``.
    """

    bce_x: Optional[np.ndarray] = None
    similarity: Optional[np.ndarray] = None
    sd_x: Optional[np.ndarray] = None
    pll_x: Optional[np.ndarray] = None
    pll_labels: Optional[np.ndarray] = None
    prototypes: Optional[np.ndarray] = None
    tau: float = 0.1
    mse_x: Optional[np.ndarray] = None
    mse_x_aug: Optional[np.ndarray] = None


# --------------------------------------------------------------------------
# forward passes
# --------------------------------------------------------------------------


def _as_batch(params: EncoderParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != params.input_dim:
        raise ValueError(f"input dimension {x.shape[1]} != encoder input {params.input_dim}")
    return x, single


def _forward(params: EncoderParams, x: np.ndarray):
    acts = [x]
    pre = []
    h = x
    last = len(params.weights) - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        a = h @ w.T + b
        pre.append(a)
        if l < last:
            h = np.maximum(a, 0.0)
            acts.append(h)
    u = pre[-1]
    norm = np.linalg.norm(u, axis=1, keepdims=True)
    safe = norm >= NORM_EPS
    z = np.where(safe, u / np.where(safe, norm, 1.0), u)
    return z, (acts, pre, norm, safe, z)


def _backward(params: EncoderParams, cache, dz: np.ndarray) -> list:
    acts, pre, norm, safe, z = cache
    radial = np.sum(z * dz, axis=1, keepdims=True)
    g = np.where(safe, (dz - z * radial) / np.where(safe, norm, 1.0), dz)
    L = len(params.weights)
    grads = [None] * (2 * L)
    for l in range(L - 1, -1, -1):
        grads[2 * l] = g.T @ acts[l]
        grads[2 * l + 1] = g.sum(axis=0)
        if l:
            g = (g @ params.weights[l]) * (pre[l - 1] > 0.0)
    return grads


def encode(params: EncoderParams, x) -> np.ndarray:
    """Embed one input vector, or each row of a matrix."""
    xb, single = _as_batch(params, x)
    z, _ = _forward(params, xb)
    return z[0] if single else z


def head_forward(head: ClusterHeadParams, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != head.weight.shape[1]:
        raise ValueError(f"embedding dimension {z.shape[-1]} != head input {head.weight.shape[1]}")
    return softmax(z @ head.weight.T + head.bias)


# --------------------------------------------------------------------------
# losses (value + gradient w.r.t. their direct inputs)
# --------------------------------------------------------------------------


def _bce_terms(c: np.ndarray, s: np.ndarray):
    n = c.shape[0]
    p = c @ c.T
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = -(s * np.log(pc) + (1.0 - s) * np.log(1.0 - pc)).sum() / n
    dpc = -(s / pc - (1.0 - s) / (1.0 - pc)) / n
    dp = np.where((p > PROB_CLAMP) & (p < 1.0 - PROB_CLAMP), dpc, 0.0)
    dc = (dp + dp.T) @ c
    return loss, dc


def loss_bce(c_list, s) -> float:
    """Pairwise binary cross entropy between cluster assignments and targets."""
    c = np.atleast_2d(np.asarray(c_list, dtype=np.float64))
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (c.shape[0], c.shape[0]):
        raise ValueError(f"similarity shape {s.shape} does not match {c.shape[0]} samples")
    return float(_bce_terms(c, s)[0])


def _pll_terms(z: np.ndarray, labels: np.ndarray, protos: np.ndarray, tau: float):
    logits = z @ protos.T / tau
    logp = log_softmax(logits)
    present, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    w = 1.0 / (len(present) * counts[inverse])
    n = z.shape[0]
    loss = -(w * logp[np.arange(n), labels]).sum()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits *= w[:, None]
    dz = dlogits @ protos / tau
    return loss, dz


def _exemplars_to_arrays(exemplars):
    xs, ys = [], []
    for k, group in enumerate(exemplars):
        group = np.atleast_2d(np.asarray(group, dtype=np.float64))
        if group.shape[0] == 0 or group.size == 0:
            raise ValueError(f"class {k} has no exemplars")
        xs.append(group)
        ys.append(np.full(group.shape[0], k, dtype=np.int64))
    return np.vstack(xs), np.concatenate(ys)


def loss_pll(dynamic: EncoderParams, exemplars, prototypes, tau: float = 0.1) -> float:
    """Prototype cross entropy; ``exemplars[k]`` holds the raw samples of class k."""
    x, y = _exemplars_to_arrays(exemplars)
    protos = np.atleast_2d(np.asarray(prototypes, dtype=np.float64))
    if protos.shape[0] != len(exemplars):
        raise ValueError("need exactly one prototype per exemplar class")
    return float(_pll_terms(encode(dynamic, x), y, protos, tau)[0])


def loss_sd(pair: BranchPair, batch) -> float:
    x, _ = _as_batch(pair.dynamic, batch)
    if x.shape[0] == 0:
        raise ValueError("static-dynamic distillation needs a non-empty batch")
    d = encode(pair.static, x) - encode(pair.dynamic, x)
    return float(np.einsum("ij,ij->", d, d) / x.shape[0])


def loss_mse_consistency(dynamic: EncoderParams, x, x_aug) -> float:
    xa, _ = _as_batch(dynamic, x)
    xb, _ = _as_batch(dynamic, x_aug)
    if xa.shape != xb.shape:
        raise ValueError("original and augmented batches differ in shape")
    d = encode(dynamic, xa) - encode(dynamic, xb)
    return float(np.einsum("ij,ij->", d, d) / xa.shape[0])


# --------------------------------------------------------------------------
# combined objective
# --------------------------------------------------------------------------


@dataclass
class Gradients:
    dynamic: list
    head: Optional[list] = None

    def flat(self) -> np.ndarray:
        parts = list(self.dynamic) + list(self.head or [])
        return np.concatenate([p.ravel() for p in parts]) if parts else np.zeros(0)

    def as_list(self) -> list:
        return list(self.dynamic) + list(self.head or [])


def objective(pair: BranchPair, ctx: LossInputs, weights: LossWeights, *, need_grad: bool = True):
    """Weighted loss, its parts, and (optionally) gradients for dynamic branch and head.

    All dynamic-branch inputs are stacked into one forward/backward pass.
    The static branch only ever enters as a constant target.
    """
    dyn = pair.dynamic
    segments = []
    parts = {"bce": 0.0, "sd": 0.0, "pll": 0.0, "mse": 0.0}
    use_bce = weights.bce > 0 and ctx.bce_x is not None and len(ctx.bce_x) > 0
    use_sd = weights.sd > 0 and ctx.sd_x is not None and len(ctx.sd_x) > 0
    use_pll = weights.pll > 0 and ctx.pll_x is not None and len(ctx.pll_x) > 0
    use_mse = weights.mse > 0 and ctx.mse_x is not None and len(ctx.mse_x) > 0
    if use_bce:
        if pair.head is None:
            raise ValueError("pairwise loss requested but the branch pair has no cluster head")
        segments.append(("bce", ctx.bce_x))
    if use_sd:
        segments.append(("sd", ctx.sd_x))
    if use_pll:
        segments.append(("pll", ctx.pll_x))
    if use_mse:
        segments.append(("mse_a", ctx.mse_x))
        segments.append(("mse_b", ctx.mse_x_aug))

    head_grads = None
    if pair.head is not None:
        head_grads = [np.zeros_like(a) for a in pair.head.arrays()]
    if not segments:
        grads = Gradients([np.zeros_like(a) for a in dyn.arrays()], head_grads)
        return 0.0, parts, grads

    xs = [_as_batch(dyn, x)[0] for _, x in segments]
    bounds = np.cumsum([0] + [x.shape[0] for x in xs])
    z_all, cache = _forward(dyn, np.vstack(xs))
    dz_all = np.zeros_like(z_all)
    sl = {name: slice(bounds[i], bounds[i + 1]) for i, (name, _) in enumerate(segments)}
    total = 0.0

    if use_bce:
        z = z_all[sl["bce"]]
        head = pair.head
        c = softmax(z @ head.weight.T + head.bias)
        val, dc = _bce_terms(c, np.asarray(ctx.similarity, dtype=np.float64))
        parts["bce"] = float(val)
        total += weights.bce * val
        dlogits = weights.bce * c * (dc - np.sum(c * dc, axis=1, keepdims=True))
        head_grads[0] += dlogits.T @ z
        head_grads[1] += dlogits.sum(axis=0)
        dz_all[sl["bce"]] += dlogits @ head.weight
    if use_sd:
        z = z_all[sl["sd"]]
        target = _forward(pair.static, xs[[n for n, _ in segments].index("sd")])[0]
        d = z - target
        n = z.shape[0]
        val = np.einsum("ij,ij->", d, d) / n
        parts["sd"] = float(val)
        total += weights.sd * val
        dz_all[sl["sd"]] += weights.sd * 2.0 * d / n
    if use_pll:
        z = z_all[sl["pll"]]
        labels = np.asarray(ctx.pll_labels, dtype=np.int64)
        protos = np.atleast_2d(np.asarray(ctx.prototypes, dtype=np.float64))
        val, dz = _pll_terms(z, labels, protos, ctx.tau)
        parts["pll"] = float(val)
        total += weights.pll * val
        dz_all[sl["pll"]] += weights.pll * dz
    if use_mse:
        za, zb = z_all[sl["mse_a"]], z_all[sl["mse_b"]]
        d = za - zb
        n = za.shape[0]
        val = np.einsum("ij,ij->", d, d) / n
        parts["mse"] = float(val)
        total += weights.mse * val
        dz_all[sl["mse_a"]] += weights.mse * 2.0 * d / n
        dz_all[sl["mse_b"]] -= weights.mse * 2.0 * d / n

    grads = None
    if need_grad:
        grads = Gradients(_backward(dyn, cache, dz_all), head_grads)
    return float(total), parts, grads


def backward(pair: BranchPair, ctx: LossInputs, weights: LossWeights) -> Gradients:
    return objective(pair, ctx, weights)[2]


def gradient_check(
    pair: BranchPair,
    ctx: LossInputs,
    weights: LossWeights,
    *,
    step: float = 1e-5,
    grad_fn: Optional[Callable[[BranchPair, LossInputs, LossWeights], Gradients]] = None,
    floor: float = 1e-6,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Relative error per parameter is ``|a - n| / max(|a|, |n|, floor)``; when
    every loss weight is zero the result is 0 by convention.
    """
    analytic = (grad_fn or backward)(pair, ctx, weights).flat()
    params = pair.trainable()
    if analytic.size != sum(p.size for p in params):
        raise ValueError("gradient layout does not match trainable parameters")
    static_before = [a.copy() for a in pair.static.arrays()]
    numeric = np.empty_like(analytic)
    pos = 0
    for arr in params:
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = objective(pair, ctx, weights, need_grad=False)[0]
            flat[i] = orig - step
            lo = objective(pair, ctx, weights, need_grad=False)[0]
            flat[i] = orig
            numeric[pos] = (hi - lo) / (2.0 * step)
            pos += 1
    assert all(np.array_equal(a, b) for a, b in zip(static_before, pair.static.arrays()))
    if not analytic.size:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


# --------------------------------------------------------------------------
# optimizer and branch merge
# --------------------------------------------------------------------------


@dataclass
class OptState:
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    decay_every: int = 60
    decay_factor: float = 0.1
    velocity: list = field(default_factory=list)
    epoch: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")

    def end_epoch(self) -> None:
        self.epoch += 1
        if self.decay_every and self.epoch % self.decay_every == 0:
            self.learning_rate *= self.decay_factor


def sgd_step(opt: OptState, params: list, grads: list) -> None:
    """In-place momentum SGD with L2 weight decay."""
    if len(params) != len(grads):
        raise ValueError("parameter and gradient lists differ in length")
    if not opt.velocity:
        opt.velocity = [np.zeros_like(p) for p in params]
    for p, g, v in zip(params, grads, opt.velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise ValueError(f"shape mismatch in optimizer: {p.shape}, {g.shape}, {v.shape}")
        v *= opt.momentum
        v += g
        if opt.weight_decay:
            v += opt.weight_decay * p
        p -= opt.learning_rate * v


def ema_merge(static: EncoderParams, dynamic: EncoderParams, alpha: float) -> EncoderParams:
    """Blend parameters: ``alpha * static + (1 - alpha) * dynamic``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if not static.same_shape(dynamic):
        raise ValueError("cannot merge encoders of different shapes")
    return EncoderParams(
        [alpha * ws + (1.0 - alpha) * wd for ws, wd in zip(static.weights, dynamic.weights)],
        [alpha * bs + (1.0 - alpha) * bd for bs, bd in zip(static.biases, dynamic.biases)],
    )
