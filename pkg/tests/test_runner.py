import json

import numpy as np
import pytest

from growmerge.memory import ExemplarStore
from growmerge.metrics import MetricsLedger
from growmerge.model import BranchPair, ClusterHeadParams, EncoderParams
from growmerge.runner import (MAGIC, Checkpoint, PhaseError, RunConfig, checkpoint_bytes, emit_report,
                              intra_class_distance, load_checkpoint, load_config, load_samples, pretrain_initial,
                              report_dict, run_experiment, save_checkpoint)
from growmerge.scenarios import Samples, build_stream

SMALL = {
    "scenario": {"kind": "CI", "timesteps": 2, "class_split": [0.5, 0.25, 0.25]},
    "data": {"classes": 4, "per_class": 60, "dim": 8, "separation": 8.0},
    "grow": {"epsilon": 0.3, "epochs": 5},
    "merge": {"epochs": 5},
    "pretrain": {"epochs": 30},
    "model": {"hidden": [16], "embed_dim": 16},
    "budget": 40,
}


def small(**over):
    raw = json.loads(json.dumps(SMALL))
    raw.update(over)
    return RunConfig.from_dict(raw)


def samples(x, labels):
    n = len(labels)
    return Samples(np.arange(n), np.asarray(x, dtype=float), labels, np.ones(n, dtype=bool), np.zeros(n, dtype=int))


def tiny_checkpoint():
    rng = np.random.default_rng(0)
    enc = EncoderParams.init([3, 4, 2], rng)
    pair = BranchPair(enc, enc.copy(), ClusterHeadParams.init(2, 2, rng))
    pair.dynamic.weights[0][0, 0] += 0.5
    store = ExemplarStore(3, 10)
    store.add_class(0, rng.normal(size=(2, 3)), 0)
    store.add_class(5, rng.normal(size=(3, 3)), 1)
    store.refresh_prototypes(pair.dynamic)
    ledger = MetricsLedger()
    ledger.add(0, 0.9)
    ledger.add(1, 0.8, 0.75)
    ledger.finalize()
    return Checkpoint(7, 1, pair, store, ledger, [2])


def assert_same_checkpoint(a, b):
    assert checkpoint_bytes(a) == checkpoint_bytes(b)
    assert (a.seed, a.timestep, a.estimated_counts) == (b.seed, b.timestep, b.estimated_counts)
    for x, y in zip(a.pair.static.arrays() + a.pair.dynamic.arrays(), b.pair.static.arrays() + b.pair.dynamic.arrays()):
        np.testing.assert_array_equal(x, y)
    assert a.store.class_ids() == b.store.class_ids()
    assert a.ledger.records == b.ledger.records


class TestConfig:
    def test_defaults(self):
        cfg = RunConfig.from_dict({})
        assert cfg.scenario.kind == "CI" and cfg.scenario.timesteps == 3
        assert cfg.merge.alpha == 0.99 and cfg.merge.tau == 0.1
        assert cfg.grow.epochs == 50 and cfg.merge.epochs == 50
        assert cfg.optim.lr == 0.1

    def test_seed_propagates(self):
        cfg = RunConfig.from_dict({"seed": 9})
        assert cfg.scenario.seed == 9
        assert RunConfig.from_dict({"seed": 9, "scenario": {"seed": 2}}).scenario.seed == 2

    @pytest.mark.parametrize("raw", [{"bogus": 1}, {"grow": {"eps": 0.1}}, {"variant": "x"},
                                     {"novel_count": "guess"}, {"merge": {"alpha": 2.0}}])
    def test_rejects(self, raw):
        with pytest.raises(ValueError):
            RunConfig.from_dict(raw)

    def test_load_and_roundtrip(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps(SMALL))
        cfg = load_config(p)
        assert RunConfig.from_dict(cfg.to_dict()) == cfg


class TestPretrain:
    def test_zero_epochs_keeps_init(self):
        cfg = small(pretrain={"epochs": 0})
        train = build_stream(load_samples(cfg), cfg.scenario)[0].train
        enc = EncoderParams.init([8, 16, 8], np.random.default_rng(0))
        pair, store, hist = pretrain_initial(enc, train, cfg)
        assert hist == []
        assert all(np.array_equal(a, b) for a, b in zip(pair.static.arrays(), enc.arrays()))
        assert all(np.array_equal(a, b) for a, b in zip(pair.static.arrays(), pair.dynamic.arrays()))
        assert pair.static is not pair.dynamic
        assert store.class_ids() == sorted(np.unique(train.labels).tolist())
        assert store.total() <= cfg.budget

    def test_unlabeled_rejected(self):
        cfg = small()
        enc = EncoderParams.init([2, 2], np.random.default_rng(0))
        with pytest.raises(ValueError):
            pretrain_initial(enc, samples(np.zeros((2, 2)), [0, -1]), cfg)

    def test_fixture_accuracy(self):
        cfg = load_config("configs/ci_fixture.json")
        cfg.scenario.timesteps = 0
        cfg.scenario.class_split = None
        res = run_experiment(cfg, write=False)
        assert res.ledger.records[0].acc_known >= 0.95


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        ckpt = tiny_checkpoint()
        save_checkpoint(tmp_path / "a.gmck", ckpt)
        back = load_checkpoint(tmp_path / "a.gmck")
        assert_same_checkpoint(ckpt, back)
        np.testing.assert_array_equal(back.pair.head.weight, ckpt.pair.head.weight)
        assert back.ledger.finalize() == (ckpt.ledger.m_f, ckpt.ledger.m_d)
        assert (tmp_path / "a.gmck").read_bytes()[:4] == MAGIC

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.gmck"
        p.write_bytes(b"XXXX" + checkpoint_bytes(tiny_checkpoint())[4:])
        with pytest.raises(ValueError, match="GMCK"):
            load_checkpoint(p)

    def test_bad_version(self, tmp_path):
        data = bytearray(checkpoint_bytes(tiny_checkpoint()))
        data[4:8] = (2).to_bytes(4, "little")
        p = tmp_path / "v.gmck"
        p.write_bytes(bytes(data))
        with pytest.raises(ValueError, match="version"):
            load_checkpoint(p)

    @pytest.mark.parametrize("cut", [3, 10, 40, -1])
    def test_truncated(self, tmp_path, cut):
        data = checkpoint_bytes(tiny_checkpoint())
        p = tmp_path / "t.gmck"
        p.write_bytes(data[:cut])
        with pytest.raises(ValueError):
            load_checkpoint(p)

    def test_trailing_bytes(self, tmp_path):
        p = tmp_path / "x.gmck"
        p.write_bytes(checkpoint_bytes(tiny_checkpoint()) + b"\0")
        with pytest.raises(ValueError):
            load_checkpoint(p)


class TestReport:
    def ledger(self, accs):
        led = MetricsLedger()
        for t, a in enumerate(accs):
            led.add(t, a, None if t == 0 else 0.5)
        led.finalize()
        return led

    def test_m_f_serialization(self, tmp_path):
        js, cs = emit_report(self.ledger([0.9, 0.85, 0.80, 0.82]), tmp_path, "CI", 3)
        text = js.read_text()
        assert '"m_f": 0.1,' in text
        data = json.loads(text)
        assert data["timesteps"][0]["acc_novel"] is None
        assert data["estimated_counts"] is None and data["seed"] == 3
        assert cs.read_text().splitlines()[:2] == ["t,acc_known,acc_novel", "0,0.9,"]

    def test_reemit_identical(self, tmp_path):
        led = self.ledger([0.7, 0.8])
        a = [p.read_bytes() for p in emit_report(led, tmp_path / "a")]
        b = [p.read_bytes() for p in emit_report(led, tmp_path / "b")]
        assert a == b

    def test_schema(self):
        d = report_dict(self.ledger([1.0]), "MI", 0, [2, 3])
        assert set(d) == {"scenario", "seed", "timesteps", "m_f", "m_d", "estimated_counts"}
        assert d["m_d"] is None and d["m_f"] == 0.0 and d["estimated_counts"] == [2, 3]


class TestIntraClassDistance:
    def test_hand_value(self):
        enc = EncoderParams([np.eye(2)], [np.zeros(2)])
        s = samples([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [2.0, 0.0]], [0, 0, 1, 1])
        assert intra_class_distance(enc, s) == pytest.approx(np.sqrt(2.0) / 2.0)


class TestRunExperiment:
    def test_zero_timesteps(self):
        cfg = small(scenario={"kind": "CI", "timesteps": 0})
        res = run_experiment(cfg, write=False)
        assert len(res.ledger.records) == 1
        assert res.ledger.m_d is None and res.ledger.m_f == 0.0

    def test_deterministic_files(self, tmp_path):
        outs = []
        for name in ("a", "b"):
            cfg = small(out_dir=str(tmp_path / name))
            run_experiment(cfg)
            outs.append([(tmp_path / name / f).read_bytes() for f in ("metrics.json", "metrics.csv", "final.gmck")])
        assert outs[0] == outs[1]
        resolved = json.loads((tmp_path / "a" / "resolved_config.json").read_text())
        assert resolved["grow"]["epsilon"] == 0.3

    @pytest.mark.parametrize("t", [0, 1])
    def test_resume(self, tmp_path, t):
        cfg = small(out_dir=str(tmp_path))
        full = run_experiment(cfg)
        ckpt = load_checkpoint(tmp_path / "checkpoints" / f"t{t}.gmck")
        resumed = run_experiment(small(), resume=ckpt, write=False)
        assert resumed.ledger == full.ledger
        assert_same_checkpoint(resumed.checkpoint, full.checkpoint)

    def test_resume_seed_mismatch(self, tmp_path):
        cfg = small(out_dir=str(tmp_path))
        run_experiment(cfg)
        ckpt = load_checkpoint(tmp_path / "final.gmck")
        with pytest.raises(ValueError, match="seed"):
            run_experiment(small(seed=1), resume=ckpt, write=False)

    def test_estimate_mode(self):
        res = run_experiment(small(novel_count="estimate"), write=False)
        assert len(res.estimated_counts) == 2
        assert all(1 <= k <= 4 for k in res.estimated_counts)

    def test_phase_error(self):
        cfg = small(grow={"epsilon": 2.5})
        with pytest.raises(PhaseError, match="timestep 1"):
            run_experiment(cfg, write=False)

    def test_static_fixed(self, tmp_path):
        res = run_experiment(small(out_dir=str(tmp_path)))
        first = load_checkpoint(tmp_path / "checkpoints" / "t0.gmck")
        for a, b in zip(res.checkpoint.pair.static.arrays(), first.pair.static.arrays()):
            np.testing.assert_array_equal(a, b)
