import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from growmerge.scenarios import (UNLABELED, Samples, ScenarioSpec, build_stream, generate_synthetic, load_csv,
                                 save_csv)


def _same(a: Samples, b: Samples):
    for f in ("ids", "x", "labels", "train", "timestep"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))


class TestGenerate:
    def test_deterministic(self):
        _same(generate_synthetic(4, 10, 5, 3.0, 7), generate_synthetic(4, 10, 5, 3.0, 7))

    def test_nearest_mean_accuracy(self):
        s, means = generate_synthetic(5, 200, 16, 10.0, 0, return_means=True)
        test = s.subset(np.flatnonzero(~s.train))
        d = ((test.x[:, None, :] - means[None]) ** 2).sum(-1)
        assert (d.argmin(1) == test.labels).mean() >= 0.99

    def test_means_separated(self):
        _, means = generate_synthetic(10, 5, 16, 8.0, 3, return_means=True)
        np.testing.assert_allclose(np.linalg.norm(means, axis=1), 8.0)
        d = np.linalg.norm(means[:, None] - means[None], axis=-1) + np.eye(10) * 1e9
        assert d.min() >= 8.0

    def test_minimum_split(self):
        s = generate_synthetic(2, 2, 3, 1.0, 0)
        for k in (0, 1):
            assert ((s.labels == k) & ~s.train).sum() >= 1
            assert ((s.labels == k) & s.train).sum() >= 1

    def test_split_80_20(self):
        s = generate_synthetic(3, 250, 4, 2.0, 0)
        assert s.train.sum() == 600

    def test_rejection_failure(self):
        with pytest.raises(RuntimeError, match="input_dim"):
            generate_synthetic(10, 5, 1, 8.0, 0, max_tries=1000)


class TestCsv:
    def test_row_format(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("7,train,0,3,0.1,0.2\n8,test,-1,-1,1,2\n")
        s = load_csv(p)
        assert s.ids[0] == 7 and s.train[0] and s.timestep[0] == 0 and s.labels[0] == 3
        np.testing.assert_array_equal(s.x[0], [0.1, 0.2])
        assert s.labels[1] == UNLABELED and not s.train[1]

    def test_wrong_width_names_line(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("id,split,timestep,label,f0,f1\n1,train,0,0,0.1,0.2\n2,train,0,0,0.1,0.2,0.3\n")
        with pytest.raises(ValueError, match="line 3"):
            load_csv(p)
        with pytest.raises(ValueError, match="line 2"):
            load_csv(p, input_dim=1)

    def test_malformed(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("1,valid,0,0,0.5\n")
        with pytest.raises(ValueError, match="line 1"):
            load_csv(p)

    def test_round_trip(self, tmp_path):
        s = generate_synthetic(3, 5, 4, 2.0, 1)
        save_csv(s, tmp_path / "s.csv")
        _same(load_csv(tmp_path / "s.csv"), s)


def fixture(classes=10, per_class=20, seed=0):
    return generate_synthetic(classes, per_class, 4, 3.0, seed)


class TestStream:
    def test_ci_blocks(self):
        st_ = build_stream(fixture(), ScenarioSpec("CI", 3))
        assert len(st_) == 4
        assert set(np.unique(st_[0].train.labels)) == set(range(7))
        for t in (1, 2, 3):
            assert st_[t].new_classes == (6 + t,)
            assert st_[t].novel_class_count == 1
            assert (st_[t].train.labels == UNLABELED).all()
            assert set(st_[t].train_truth) == {6 + t}
            assert set(np.unique(st_[t].test.labels)) == set(range(7 + t))
        assert st_[0].novel_class_count is None

    def test_di_same_classes(self):
        s = fixture()
        st_ = build_stream(s, ScenarioSpec("DI", 3))
        for b in st_:
            assert set(np.unique(b.train_truth)) == set(range(10))
            assert b.new_classes == ()
        assert sum(len(b.train) for b in st_) == s.train.sum()
        assert len(st_[0].train) == s.train.sum() // 4

    def test_smi_labeled_fraction(self):
        st_ = build_stream(fixture(per_class=25), ScenarioSpec("SMI", 3, labeled_fraction=0.2))
        for b in st_[1:]:
            n = len(b.train)
            labeled = b.train.labels != UNLABELED
            assert labeled.sum() == int(np.floor(0.2 * n))
            # lowest ids keep their labels
            assert labeled[: labeled.sum()].all()
            assert (np.diff(b.train.ids) > 0).all()

    def test_mi_renormalized_table(self):
        s = fixture(per_class=125)
        st_ = build_stream(s, ScenarioSpec("MI", 3))
        counts = [(b.train_truth < 7).sum() for b in st_]
        assert sum(counts) == 700
        assert counts[0] == pytest.approx(700 * 0.87 / 0.99, abs=7)

    def test_unsatisfiable(self):
        with pytest.raises(ValueError):
            build_stream(fixture(classes=2), ScenarioSpec("CI", 3))

    def test_proportion_validation(self):
        with pytest.raises(ValueError):
            ScenarioSpec("CI", 1, class_split=[0.5, 0.6])
        with pytest.raises(ValueError):
            ScenarioSpec("XX")

    def test_preset_timesteps_respected(self):
        s = fixture()
        s.timestep[s.train] = np.where(s.labels[s.train] < 5, 0, 1)
        st_ = build_stream(s, ScenarioSpec("CI", 1))
        assert set(st_[1].train_truth) == set(range(5, 10))

    @settings(max_examples=25, deadline=None)
    @given(st.sampled_from(["CI", "DI", "MI", "SMI"]), st.integers(1, 4), st.integers(0, 50))
    def test_invariants(self, kind, T, seed):
        s = fixture(classes=12, per_class=30, seed=seed)
        spec = ScenarioSpec(kind, T, seed=seed)
        batches = build_stream(s, spec)
        ids = np.concatenate([b.train.ids for b in batches])
        assert sorted(ids) == sorted(s.ids[s.train])  # each train sample in exactly one stage
        seen_before = set()
        prev_test = set()
        for b in batches:
            test_ids = set(b.test.ids.tolist())
            assert prev_test <= test_ids
            prev_test = test_ids
            assert set(np.unique(b.test.labels)) <= set(b.seen_classes)
            if kind == "CI" and b.t >= 1:
                assert not (set(b.train_truth.tolist()) & seen_before)
            if kind == "DI":
                assert set(b.train_truth.tolist()) == set(range(12))
            seen_before |= set(b.train_truth.tolist())
        again = build_stream(s, spec)
        for a, b in zip(batches, again):
            _same(a.train, b.train)
            _same(a.test, b.test)
