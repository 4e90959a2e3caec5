"""Synthetic data, CSV ingestion and CI/DI/MI/SMI timestep streams."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

log = logging.getLogger(__name__)

UNLABELED = -1
KINDS = ("CI", "DI", "MI", "SMI")

# Mixed-incremental data table for T=3: row = class block, column = timestep.
# Block 0 lists 87/7/2/3 which sums to 0.99; rows are renormalized on use.
MI_TABLE_T3 = (
    (0.87, 0.07, 0.02, 0.03),
    (0.00, 0.70, 0.20, 0.10),
    (0.00, 0.00, 0.90, 0.10),
    (0.00, 0.00, 0.00, 1.00),
)


@dataclass
class Samples:
    """Struct-of-arrays sample collection.

    ``labels`` holds ``UNLABELED`` (-1) for samples without a label.
    """

    ids: np.ndarray
    x: np.ndarray
    labels: np.ndarray
    train: np.ndarray
    timestep: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim == 1:
            self.x = self.x.reshape(len(self.ids), -1) if len(self.ids) else self.x.reshape(0, 0)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.train = np.asarray(self.train, dtype=bool)
        self.timestep = np.asarray(self.timestep, dtype=np.int64)
        n = len(self.ids)
        for name in ("x", "labels", "train", "timestep"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"field {name} has {len(getattr(self, name))} rows, expected {n}")
        if not np.isfinite(self.x).all():
            raise ValueError("sample features must be finite")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "Samples":
        idx = np.asarray(idx)
        return Samples(self.ids[idx], self.x[idx], self.labels[idx], self.train[idx], self.timestep[idx])

    @classmethod
    def empty(cls, dim: int) -> "Samples":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, np.zeros((0, dim)), z, np.zeros(0, dtype=bool), z)

    @classmethod
    def concat(cls, parts) -> "Samples":
        parts = list(parts)
        return cls(
            np.concatenate([p.ids for p in parts]),
            np.vstack([p.x for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.train for p in parts]),
            np.concatenate([p.timestep for p in parts]),
        )


@dataclass
class ScenarioSpec:
    kind: str = "CI"
    timesteps: int = 3
    total_classes: Optional[int] = None
    class_split: Optional[list] = None
    data_split: Optional[list] = None
    labeled_fraction: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        self.kind = self.kind.upper()
        if self.kind not in KINDS:
            raise ValueError(f"unknown scenario {self.kind!r}; expected one of {KINDS}")
        if self.timesteps < 0:
            raise ValueError("timesteps must be >= 0")
        if self.labeled_fraction is None:
            self.labeled_fraction = 0.2 if self.kind == "SMI" else 0.0
        if not 0.0 <= self.labeled_fraction <= 1.0:
            raise ValueError("labeled_fraction must lie in [0, 1]")
        if self.class_split is not None:
            _check_proportions(self.class_split, "class_split")
            if len(self.class_split) != self.timesteps + 1:
                raise ValueError("class_split needs one entry per stage (initial + timesteps)")


@dataclass
class StreamBatch:
    t: int
    train: Samples
    test: Samples
    novel_class_count: Optional[int]
    new_classes: tuple = ()
    seen_classes: tuple = ()
    train_truth: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def known_classes(self) -> tuple:
        return tuple(c for c in self.seen_classes if c not in self.new_classes)


def _check_proportions(props, name):
    props = np.asarray(props, dtype=np.float64)
    if (props < 0).any() or abs(props.sum() - 1.0) > 1e-9:
        raise ValueError(f"{name} must be non-negative and sum to 1, got {props.tolist()}")


# --------------------------------------------------------------------------
# generation and IO
# --------------------------------------------------------------------------


def generate_synthetic(classes: int, per_class: int, input_dim: int, separation: float,
                       seed: int, *, max_tries: int = 100_000, return_means: bool = False):
    """Isotropic unit-variance Gaussian blobs with well separated means.

    Means lie on a sphere of radius ``separation`` and are at least
    ``separation`` apart. Each class is split 80/20 into train/test with at
    least one test sample.
    """
    if classes < 2 or per_class < 2 or separation <= 0 or input_dim < 1:
        raise ValueError("need classes >= 2, per_class >= 2, separation > 0, input_dim >= 1")
    rng = np.random.default_rng(seed)
    means = []
    tries = 0
    while len(means) < classes:
        tries += 1
        if tries > max_tries:
            raise RuntimeError(
                f"could not place {classes} means {separation} apart after {max_tries} tries; "
                "use a larger input_dim or a smaller separation"
            )
        d = rng.normal(size=input_dim)
        cand = separation * d / np.linalg.norm(d)
        if all(np.linalg.norm(cand - m) >= separation for m in means):
            means.append(cand)
    means = np.vstack(means)

    n_test = max(1, int(round(0.2 * per_class)))
    n_train = per_class - n_test
    xs, labels, train = [], [], []
    for k in range(classes):
        xs.append(means[k] + rng.normal(size=(per_class, input_dim)))
        labels.append(np.full(per_class, k))
        train.append(np.arange(per_class) < n_train)
    n = classes * per_class
    samples = Samples(np.arange(n), np.vstack(xs), np.concatenate(labels), np.concatenate(train),
                      np.full(n, -1))
    return (samples, means) if return_means else samples


def load_csv(path, input_dim: Optional[int] = None) -> Samples:
    """Read ``id,split,timestep,label,f0,...`` rows; a header row is optional.

    When ``input_dim`` is given every row must carry exactly that many
    features; otherwise the first row fixes the dimension.
    """
    ids, xs, labels, train, ts = [], [], [], [], []
    dim = input_dim
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if lineno == 1 and row[0].strip().lower() == "id":
                continue
            try:
                if len(row) < 5:
                    raise ValueError("expected at least 5 fields")
                split = row[1].strip().lower()
                if split not in ("train", "test"):
                    raise ValueError(f"split must be train or test, got {row[1]!r}")
                feats = [float(v) for v in row[4:]]
                label = int(row[3])
                if label < UNLABELED:
                    raise ValueError(f"label {label} is not a class id or -1")
                rec = (int(row[0]), split == "train", int(row[2]), label)
            except ValueError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
            if dim is None:
                dim = len(feats)
            elif len(feats) != dim:
                raise ValueError(f"{path}: line {lineno}: expected {dim} features, found {len(feats)}")
            ids.append(rec[0])
            train.append(rec[1])
            ts.append(rec[2])
            labels.append(rec[3])
            xs.append(feats)
    if dim is None:
        raise ValueError(f"{path}: no samples")
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate sample ids")
    return Samples(ids, np.asarray(xs).reshape(len(ids), dim), labels, train, ts)


def save_csv(samples: Samples, path) -> None:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "split", "timestep", "label"] + [f"f{i}" for i in range(samples.dim)])
        for i in range(len(samples)):
            w.writerow(
                [int(samples.ids[i]), "train" if samples.train[i] else "test", int(samples.timestep[i]),
                 int(samples.labels[i])] + [repr(float(v)) for v in samples.x[i]]
            )


# --------------------------------------------------------------------------
# stream construction
# --------------------------------------------------------------------------


def _split_counts(total: int, props) -> np.ndarray:
    """Largest-remainder rounding of ``total * props``."""
    props = np.asarray(props, dtype=np.float64)
    raw = total * props
    base = np.floor(raw + 1e-9).astype(np.int64)
    rest = total - base.sum()
    order = np.lexsort((np.arange(len(props)), -(raw - base)))
    base[order[:rest]] += 1
    return base


def _class_blocks(classes: np.ndarray, spec: ScenarioSpec) -> list:
    T = spec.timesteps
    props = spec.class_split or ([1.0] if T == 0 else [0.7] + [0.3 / T] * T)
    _check_proportions(props, "class_split")
    counts = _split_counts(len(classes), props)
    if (counts == 0).any():
        raise ValueError(
            f"{len(classes)} classes cannot be split as {list(props)}: some stage would get no class"
        )
    edges = np.concatenate([[0], np.cumsum(counts)])
    return [classes[edges[b]:edges[b + 1]] for b in range(len(counts))]


def _mi_table(spec: ScenarioSpec) -> np.ndarray:
    T = spec.timesteps
    if spec.data_split is not None:
        table = np.asarray(spec.data_split, dtype=np.float64)
    elif T == 3:
        table = np.asarray(MI_TABLE_T3)
    else:
        # block b enters at t=b with 70% (87% for the initial block), rest spread evenly afterwards
        table = np.zeros((T + 1, T + 1))
        for b in range(T + 1):
            first = 0.87 if b == 0 else 0.7
            later = T - b
            if later == 0:
                table[b, b] = 1.0
            else:
                table[b, b] = first
                table[b, b + 1:] = (1.0 - first) / later
    if table.shape != (T + 1, T + 1):
        raise ValueError(f"data_split table must be {(T + 1, T + 1)}, got {table.shape}")
    if (table < 0).any() or (np.tril(table, -1) > 0).any():
        raise ValueError("data_split: a class block cannot contribute before it is introduced")
    sums = table.sum(axis=1, keepdims=True)
    if (sums <= 0).any():
        raise ValueError("data_split: every class block needs some data")
    return table / sums


def _chunk(idx: np.ndarray, props) -> list:
    counts = _split_counts(len(idx), props)
    edges = np.concatenate([[0], np.cumsum(counts)])
    return [idx[edges[i]:edges[i + 1]] for i in range(len(counts))]


def build_stream(samples: Samples, spec: ScenarioSpec) -> list:
    """Split ``samples`` into the initial stage plus ``spec.timesteps`` batches.

    Train samples whose ``timestep`` is already >= 0 keep it; otherwise the
    scenario decides. Labels of train samples at t >= 1 are stripped except
    for the SMI labeled fraction (lowest ids first). Test sets accumulate
    every class seen so far.
    """
    T = spec.timesteps
    tr = np.flatnonzero(samples.train)
    te = np.flatnonzero(~samples.train)
    if (samples.labels[tr] < 0).any() and (samples.timestep[tr] < 0).any():
        raise ValueError("unlabeled train samples need an explicit timestep")
    if (samples.labels[te] < 0).any():
        raise ValueError("test samples must carry labels")
    classes = np.unique(samples.labels[tr][samples.labels[tr] >= 0])
    if spec.total_classes is not None and len(classes) != spec.total_classes:
        raise ValueError(f"scenario expects {spec.total_classes} classes, data has {len(classes)}")

    stage = np.full(len(samples), -1, dtype=np.int64)
    preset = samples.timestep[tr] >= 0
    if preset.all() and len(tr):
        if samples.timestep[tr].max() > T:
            raise ValueError("sample timestep exceeds the scenario's timesteps")
        stage[tr] = samples.timestep[tr]
    else:
        if preset.any():
            log.warning("ignoring partial timestep assignment in input; scenario %s decides", spec.kind)
        rng = np.random.default_rng(spec.seed)
        by_class = {}
        for c in classes:
            idx = tr[samples.labels[tr] == c]
            idx = idx[np.argsort(samples.ids[idx], kind="stable")]
            by_class[int(c)] = idx
        if spec.kind == "CI":
            for b, block in enumerate(_class_blocks(classes, spec)):
                for c in block:
                    stage[by_class[int(c)]] = b
        elif spec.kind == "DI":
            props = spec.data_split or [1.0 / (T + 1)] * (T + 1)
            _check_proportions(props, "data_split")
            if len(props) != T + 1:
                raise ValueError("DI data_split needs one entry per stage")
            for c, idx in by_class.items():
                idx = idx[rng.permutation(len(idx))]
                for t, part in enumerate(_chunk(idx, props)):
                    stage[part] = t
        else:
            table = _mi_table(spec)
            for b, block in enumerate(_class_blocks(classes, spec)):
                for c in block:
                    idx = by_class[int(c)]
                    idx = idx[rng.permutation(len(idx))]
                    for t, part in enumerate(_chunk(idx, table[b])):
                        stage[part] = t

    truth = samples.labels.copy()
    intro = {}
    for t in range(T + 1):
        for c in np.unique(truth[tr][stage[tr] == t]):
            if c >= 0:
                intro.setdefault(int(c), t)
    for c in np.unique(truth[te]):
        if int(c) not in intro:
            raise ValueError(f"test class {int(c)} never appears in the train stream")
    if stage[tr].min(initial=0) < 0:
        raise ValueError("some train samples were not assigned a timestep")
    if (truth[tr][stage[tr] == 0] < 0).any():
        raise ValueError("the initial stage must be fully labeled")

    batches = []
    frac = spec.labeled_fraction if spec.kind == "SMI" else 0.0
    for t in range(T + 1):
        idx = tr[stage[tr] == t]
        idx = idx[np.argsort(samples.ids[idx], kind="stable")]
        train = samples.subset(idx)
        train.timestep[:] = t
        batch_truth = train.labels.copy()
        if t >= 1:
            keep = int(np.floor(frac * len(idx) + 1e-9))
            train.labels[keep:] = UNLABELED
        seen = sorted(c for c, t0 in intro.items() if t0 <= t)
        new = sorted(c for c, t0 in intro.items() if t0 == t) if t >= 1 else []
        tidx = te[np.isin(truth[te], seen)]
        tidx = tidx[np.argsort(samples.ids[tidx], kind="stable")]
        test = samples.subset(tidx)
        batches.append(StreamBatch(t, train, test, len(new) if t >= 1 else None,
                                   tuple(new), tuple(seen), batch_truth))
    return batches
