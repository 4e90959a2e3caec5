"""Configuration, the full grow/merge timeline, checkpoints and reports."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .class_count import estimate_novel_count
from .grow import GrowConfig, detect_novelty, minibatches, run_growing
from .memory import DEFAULT_BUDGET, ExemplarStore, herd_exemplars
from .merge import MergeConfig, run_merging, sift_samples, unify_branches, unify_categories
from .metrics import MetricsLedger, evaluate_timestep
from .model import (BranchPair, ClusterHeadParams, EncoderParams, LossInputs, LossWeights, OptState,
                    encode, head_forward, objective, sgd_step)
from .numeric import l2_normalize
from .scenarios import ScenarioSpec, Samples, build_stream, generate_synthetic, load_csv

log = logging.getLogger(__name__)

# stage tags mixed into the seed so every random draw is addressable
_INIT, _PRETRAIN, _HEAD, _GROW, _MERGE, _ESTIMATE = range(6)


class PhaseError(RuntimeError):
    def __init__(self, timestep: int, message: str):
        super().__init__(f"timestep {timestep}: {message}")
        self.timestep = timestep


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


@dataclass
class DataConfig:
    csv: Optional[str] = None
    classes: int = 10
    per_class: int = 250
    dim: int = 16
    separation: float = 8.0
    seed: Optional[int] = None


@dataclass
class ModelConfig:
    hidden: list = field(default_factory=lambda: [64])
    embed_dim: int = 32


@dataclass
class OptimConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    decay_every: int = 60
    decay_factor: float = 0.1

    def state(self) -> OptState:
        return OptState(self.lr, self.momentum, self.weight_decay, self.decay_every, self.decay_factor)


@dataclass
class PretrainConfig:
    epochs: int = 30
    batch_size: int = 128
    tau: float = 0.1
    augment_sigma: float = 0.05


@dataclass
class RunConfig:
    scenario: ScenarioSpec = field(default_factory=ScenarioSpec)
    data: DataConfig = field(default_factory=DataConfig)
    grow: GrowConfig = field(default_factory=GrowConfig)
    merge: MergeConfig = field(default_factory=MergeConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    budget: int = DEFAULT_BUDGET
    novel_count: str = "given"
    count_range: Optional[list] = None
    variant: str = "gm"
    seed: int = 0
    out_dir: Optional[str] = None

    def __post_init__(self):
        if self.novel_count not in ("given", "estimate"):
            raise ValueError("novel_count must be 'given' or 'estimate'")
        if self.variant not in ("gm", "no_merge"):
            raise ValueError("variant must be 'gm' or 'no_merge'")
        if self.budget < 1:
            raise ValueError("budget must be positive")

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        raw = dict(raw or {})
        sections = {
            "scenario": ScenarioSpec, "data": DataConfig, "grow": GrowConfig, "merge": MergeConfig,
            "model": ModelConfig, "weights": LossWeights, "optim": OptimConfig, "pretrain": PretrainConfig,
        }
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in raw.items():
            if key in sections:
                sub = sections[key]
                names = {f.name for f in dataclasses.fields(sub)}
                bad = set(value) - names
                if bad:
                    raise ValueError(f"unknown keys in {key}: {sorted(bad)}")
                kwargs[key] = sub(**value)
            else:
                kwargs[key] = value
        cfg = cls(**kwargs)
        if "scenario" not in raw or "seed" not in raw.get("scenario", {}):
            cfg.scenario.seed = cfg.seed
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return RunConfig.from_dict(json.load(fh))


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, *tags])


def _seed(seed: int, *tags: int) -> list:
    return [int(seed) & 0xFFFFFFFFFFFFFFFF, *tags]


def load_samples(cfg: RunConfig) -> Samples:
    if cfg.data.csv:
        return load_csv(cfg.data.csv)
    d = cfg.data
    return generate_synthetic(d.classes, d.per_class, d.dim, d.separation,
                              cfg.seed if d.seed is None else d.seed)


# --------------------------------------------------------------------------
# pretraining
# --------------------------------------------------------------------------


def pretrain_initial(encoder: EncoderParams, train: Samples, cfg: RunConfig):
    """Supervised prototype training plus noise consistency on the labeled stage.

    Returns a branch pair (both branches a copy of the trained encoder), an
    exemplar store for the initial classes, and the per-epoch loss history.
    """
    if (train.labels < 0).any():
        raise ValueError("initial stage contains unlabeled samples")
    if len(train) == 0:
        raise ValueError("initial stage has no samples")
    enc = encoder.copy()
    classes = np.unique(train.labels)
    rows = np.searchsorted(classes, train.labels)
    pc = cfg.pretrain
    weights = LossWeights(0.0, 0.0, cfg.weights.pll, cfg.weights.mse)
    opt = cfg.optim.state()
    pair = BranchPair(enc, enc)
    rng = _rng(cfg.seed, _PRETRAIN)
    history = []
    for _ in range(pc.epochs):
        z = encode(enc, train.x)
        protos = l2_normalize(np.vstack([z[rows == r].mean(axis=0) for r in range(len(classes))]))
        total = 0.0
        batches = minibatches(len(train), pc.batch_size, rng)
        for idx in batches:
            xb = train.x[idx]
            ctx = LossInputs(pll_x=xb, pll_labels=rows[idx], prototypes=protos, tau=pc.tau,
                             mse_x=xb, mse_x_aug=xb + rng.normal(0.0, pc.augment_sigma, size=xb.shape))
            loss, _, grads = objective(pair, ctx, weights)
            sgd_step(opt, pair.trainable(), grads.as_list())
            total += loss
        opt.end_epoch()
        history.append(total / len(batches))

    store = ExemplarStore(train.dim, cfg.budget)
    quota = cfg.budget // len(classes)
    if quota < 1:
        raise ValueError(f"budget {cfg.budget} cannot hold {len(classes)} classes")
    for c in classes:
        store.add_class(int(c), herd_exemplars(train.x[train.labels == c], enc, quota), 0)
    store.refresh_prototypes(enc)
    return BranchPair.from_pretrained(enc), store, history


# --------------------------------------------------------------------------
# checkpoint
# --------------------------------------------------------------------------

MAGIC = b"GMCK"
VERSION = 1


@dataclass
class Checkpoint:
    seed: int
    timestep: int
    pair: BranchPair
    store: ExemplarStore
    ledger: MetricsLedger
    estimated_counts: Optional[list] = None


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ValueError(f"{self.path}: truncated checkpoint (needed {n} bytes at offset {self.pos})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def array(self, shape) -> np.ndarray:
        count = int(np.prod(shape))
        return np.frombuffer(self.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)


def _write_encoder(buf, enc: EncoderParams):
    for w, b in zip(enc.weights, enc.biases):
        buf.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    pair = ckpt.pair
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<qq", int(ckpt.seed), int(ckpt.timestep)))
    sizes = pair.static.sizes
    buf.write(struct.pack("<I", len(sizes)))
    buf.write(struct.pack(f"<{len(sizes)}I", *sizes))
    _write_encoder(buf, pair.static)
    _write_encoder(buf, pair.dynamic)
    if pair.head is None:
        buf.write(struct.pack("<II", 0, 0))
    else:
        buf.write(struct.pack("<II", *pair.head.weight.shape))
        buf.write(np.ascontiguousarray(pair.head.weight, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(pair.head.bias, dtype="<f8").tobytes())
    store = ckpt.store
    buf.write(struct.pack("<III", store.budget, store.input_dim, len(store)))
    for cid in store.class_ids():
        mem = store.classes[cid]
        buf.write(struct.pack("<qqI", cid, mem.source_timestep, len(mem.samples)))
        buf.write(np.ascontiguousarray(mem.samples, dtype="<f8").tobytes())
    recs = ckpt.ledger.records
    buf.write(struct.pack("<I", len(recs)))
    for r in recs:
        buf.write(struct.pack("<qdd", r.t, r.acc_known, np.nan if r.acc_novel is None else r.acc_novel))
    if ckpt.estimated_counts is None:
        buf.write(struct.pack("<I", 0xFFFFFFFF))
    else:
        buf.write(struct.pack("<I", len(ckpt.estimated_counts)))
        for c in ckpt.estimated_counts:
            buf.write(struct.pack("<q", int(c)))
    return buf.getvalue()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    rd = _Reader(Path(path).read_bytes(), path)
    magic = rd.take(4)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {MAGIC.decode()!r}")
    (version,) = rd.unpack("<I")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    seed, timestep = rd.unpack("<qq")
    (n_sizes,) = rd.unpack("<I")
    if n_sizes < 2 or n_sizes > 64:
        raise ValueError(f"{path}: implausible layer count {n_sizes}")
    sizes = rd.unpack(f"<{n_sizes}I")

    def read_encoder():
        ws, bs = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            ws.append(rd.array((fan_out, fan_in)))
            bs.append(rd.array((fan_out,)))
        return EncoderParams(ws, bs)

    static, dynamic = read_encoder(), read_encoder()
    hk, hd = rd.unpack("<II")
    head = None
    if hk:
        head = ClusterHeadParams(rd.array((hk, hd)), rd.array((hk,)))
    budget, input_dim, n_classes = rd.unpack("<III")
    store = ExemplarStore(input_dim, budget)
    for _ in range(n_classes):
        cid, src_t, count = rd.unpack("<qqI")
        store.add_class(cid, rd.array((count, input_dim)), src_t)
    ledger = MetricsLedger()
    (n_rec,) = rd.unpack("<I")
    for _ in range(n_rec):
        t, known, novel = rd.unpack("<qdd")
        ledger.add(t, known, None if np.isnan(novel) else novel)
    (n_est,) = rd.unpack("<I")
    estimates = None if n_est == 0xFFFFFFFF else [rd.unpack("<q")[0] for _ in range(n_est)]
    if rd.pos != len(rd.data):
        raise ValueError(f"{path}: {len(rd.data) - rd.pos} trailing bytes after checkpoint")
    return Checkpoint(seed, timestep, BranchPair(static, dynamic, head), store, ledger, estimates)


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------


def _num(v):
    return None if v is None else float(f"{v:.12g}")


def report_dict(ledger: MetricsLedger, scenario: str, seed: int, estimated_counts=None) -> dict:
    return {
        "scenario": scenario,
        "seed": int(seed),
        "timesteps": [{"t": r.t, "acc_known": _num(r.acc_known), "acc_novel": _num(r.acc_novel)}
                      for r in ledger.records],
        "m_f": _num(ledger.m_f),
        "m_d": _num(ledger.m_d),
        "estimated_counts": None if estimated_counts is None else [int(c) for c in estimated_counts],
    }


def emit_report(ledger: MetricsLedger, out_dir, scenario: str = "CI", seed: int = 0,
                estimated_counts=None) -> tuple:
    """Write ``metrics.json`` and ``metrics.csv`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    js = out / "metrics.json"
    js.write_text(json.dumps(report_dict(ledger, scenario, seed, estimated_counts), indent=2) + "\n",
                  encoding="utf-8")
    cs = out / "metrics.csv"
    with open(cs, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "acc_known", "acc_novel"])
        for r in ledger.records:
            w.writerow([r.t, repr(_num(r.acc_known)), "" if r.acc_novel is None else repr(_num(r.acc_novel))])
    return js, cs


# --------------------------------------------------------------------------
# orchestration
# --------------------------------------------------------------------------


def intra_class_distance(encoder: EncoderParams, samples: Samples) -> float:
    """Mean over classes of the mean pairwise euclidean embedding distance."""
    z = encode(encoder, samples.x)
    vals = []
    for c in np.unique(samples.labels):
        zc = z[samples.labels == c]
        if len(zc) < 2:
            continue
        diff = zc[:, None, :] - zc[None, :, :]
        d = np.sqrt(np.einsum("ijd,ijd->ij", diff, diff))
        n = len(zc)
        vals.append(d.sum() / (n * (n - 1)))
    return float(np.mean(vals)) if vals else 0.0


@dataclass
class ExperimentResult:
    ledger: MetricsLedger
    checkpoint: Checkpoint
    estimated_counts: Optional[list]
    diagnostics: list


def _count_range(cfg: RunConfig, truth: Optional[int]):
    if cfg.count_range is not None:
        lo, hi = cfg.count_range
        return range(int(lo), int(hi) + 1)
    if truth:
        return range(1, 2 * truth + 3)
    return range(1, 11)


def _timestep(t: int, batch, pair: BranchPair, store: ExemplarStore, cfg: RunConfig, estimates: list) -> dict:
    gc, mc = cfg.grow, cfg.merge
    diag = {"t": t}
    x = batch.train.x
    novel_idx, _ = detect_novelty(x, store, pair.dynamic, gc.epsilon, gc.metric)
    novel_x = x[novel_idx]
    diag["n_novel_detected"] = int(len(novel_x))

    if cfg.novel_count == "given":
        k_new = int(batch.novel_class_count or 0)
    else:
        k_new = estimate_novel_count(encode(pair.dynamic, x), store, pair.dynamic,
                                     _count_range(cfg, batch.novel_class_count), seed=int(_rng(cfg.seed, _ESTIMATE, t).integers(2**31)))
        estimates.append(k_new)
    diag["k_new"] = k_new
    diag["intra_before"] = intra_class_distance(pair.dynamic, batch.test)

    pair.head = None
    if k_new >= 1:
        pair.head = ClusterHeadParams.init(k_new, pair.dynamic.output_dim, _rng(cfg.seed, _HEAD, t))
        diag["grow_log"] = run_growing(pair, novel_x, gc, cfg.weights, cfg.optim.state(),
                                       _seed(cfg.seed, _GROW, t), sd_pool=x)
        diag["intra_after_grow"] = intra_class_distance(pair.dynamic, batch.test)
        z = encode(pair.dynamic, novel_x)
        pseudo = np.argmax(head_forward(pair.head, z), axis=1)
        keep = sift_samples(z, pseudo, mc.sift_j, mc.sift_fraction)
        diag["n_sifted_kept"] = int(keep.sum())
        if keep.any():
            unify_categories(pair.dynamic, novel_x[keep], pseudo[keep], store, t)
    else:
        diag["intra_after_grow"] = diag["intra_before"]

    if cfg.variant == "gm":
        diag["merge_log"] = run_merging(pair, store, novel_x if pair.head is not None else None, mc,
                                        cfg.weights, cfg.optim.state(), _seed(cfg.seed, _MERGE, t))
        unify_branches(pair, mc.alpha)
    store.refresh_prototypes(pair.dynamic)
    diag["intra_after_merge"] = intra_class_distance(pair.dynamic, batch.test)
    return diag


def run_experiment(cfg: RunConfig, resume: Optional[Checkpoint] = None, *, write: bool = True) -> ExperimentResult:
    """Pretrain, then grow and merge for every timestep; evaluate after each.

    With ``resume`` the run continues after the checkpoint's timestep and
    produces the same ledger as an uninterrupted run.
    """
    samples = load_samples(cfg)
    stream = build_stream(samples, cfg.scenario)
    out = Path(cfg.out_dir) if (cfg.out_dir and write) else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        (out / "resolved_config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n", encoding="utf-8")

    metric = cfg.grow.metric
    estimates = [] if cfg.novel_count == "estimate" else None
    diagnostics = []
    if resume is None:
        sizes = [samples.dim] + list(cfg.model.hidden) + [cfg.model.embed_dim]
        enc = EncoderParams.init(sizes, _rng(cfg.seed, _INIT))
        pair, store, history = pretrain_initial(enc, stream[0].train, cfg)
        ledger = MetricsLedger()
        acc0, _ = evaluate_timestep(store, pair.dynamic, stream[0].test, stream[0].seen_classes, (), metric)
        ledger.add(0, acc0, None)
        diagnostics.append({"t": 0, "pretrain_log": history})
        start = 1
        ckpt = Checkpoint(cfg.seed, 0, pair, store, ledger, estimates)
        if out is not None:
            save_checkpoint(out / "checkpoints" / "t0.gmck", ckpt)
    else:
        if resume.seed != cfg.seed:
            raise ValueError(f"checkpoint seed {resume.seed} differs from config seed {cfg.seed}")
        pair, store = resume.pair, resume.store.copy()
        ledger = MetricsLedger([dataclasses.replace(r) for r in resume.ledger.records])
        if estimates is not None:
            estimates = list(resume.estimated_counts or [])
        start = resume.timestep + 1

    for t in range(start, cfg.scenario.timesteps + 1):
        batch = stream[t]
        try:
            diag = _timestep(t, batch, pair, store, cfg, estimates)
            acc_k, acc_n = evaluate_timestep(store, pair.dynamic, batch.test, batch.known_classes,
                                             batch.new_classes, metric)
        except (ValueError, RuntimeError, FloatingPointError) as exc:
            raise PhaseError(t, str(exc)) from exc
        ledger.add(t, acc_k, acc_n)
        diag.update(acc_known=acc_k, acc_novel=acc_n)
        diagnostics.append(diag)
        log.info("t=%d acc_known=%.4f acc_novel=%s", t, acc_k, acc_n)
        ckpt = Checkpoint(cfg.seed, t, pair, store, ledger, estimates)
        if out is not None:
            save_checkpoint(out / "checkpoints" / f"t{t}.gmck", ckpt)

    ledger.finalize()
    ckpt = Checkpoint(cfg.seed, cfg.scenario.timesteps, pair, store, ledger, estimates)
    if out is not None:
        save_checkpoint(out / "final.gmck", ckpt)
        emit_report(ledger, out, cfg.scenario.kind, cfg.seed, estimates)
        (out / "diagnostics.json").write_text(json.dumps(diagnostics, indent=1, default=float) + "\n",
                                              encoding="utf-8")
    return ExperimentResult(ledger, ckpt, estimates, diagnostics)
