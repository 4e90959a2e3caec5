import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from growmerge.numeric import (COSINE, SQEUCLIDEAN, distance, hungarian_assign, l2_normalize, log_softmax,
                               pad_square, pairwise_distance, softmax)
from oracles import brute_assign

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


class TestNormalize:
    def test_examples(self):
        np.testing.assert_allclose(l2_normalize([3.0, 4.0]), [0.6, 0.8])
        np.testing.assert_array_equal(l2_normalize([0.0, 0.0]), [0.0, 0.0])
        np.testing.assert_array_equal(l2_normalize([1.0, 0.0]), [1.0, 0.0])

    def test_rows(self):
        out = l2_normalize(np.array([[3.0, 4.0], [0.0, 0.0], [0.0, 2.0]]))
        np.testing.assert_allclose(out, [[0.6, 0.8], [0.0, 0.0], [0.0, 1.0]])

    def test_below_threshold_passthrough(self):
        v = np.array([1e-13, 0.0])
        np.testing.assert_array_equal(l2_normalize(v), v)

    @given(arrays(np.float64, st.integers(1, 8), elements=finite))
    def test_idempotent(self, v):
        once = l2_normalize(v)
        if np.linalg.norm(v) >= 1e-12:
            assert abs(np.linalg.norm(once) - 1.0) < 1e-12
            np.testing.assert_allclose(l2_normalize(once), once, atol=1e-15, rtol=0)


class TestDistance:
    def test_examples(self):
        assert distance([1.0, 0.0], [0.0, 1.0], COSINE) == pytest.approx(1.0)
        assert distance([2.0, 5.0], [2.0, 5.0], COSINE) == 0.0
        assert distance([2.0, 5.0], [2.0, 5.0], SQEUCLIDEAN) == 0.0
        assert distance([1.0, 0.0], [3.0, 0.0], SQEUCLIDEAN) == 4.0

    def test_scaled_direction_is_zero(self):
        assert distance([1.0, 0.0], [3.0, 0.0], COSINE) == 0.0

    def test_errors(self):
        with pytest.raises(ValueError):
            distance([1.0, 0.0], [1.0, 0.0, 0.0])
        with pytest.raises(ValueError):
            distance([0.0, 0.0], [1.0, 0.0], COSINE)
        with pytest.raises(ValueError):
            distance([1.0], [1.0], "manhattan")

    @given(st.integers(1, 6).flatmap(lambda d: st.tuples(arrays(np.float64, d, elements=finite),
                                                         arrays(np.float64, d, elements=finite))))
    def test_symmetric(self, ab):
        a, b = ab
        assert distance(a, b, SQEUCLIDEAN) == distance(b, a, SQEUCLIDEAN)
        if np.linalg.norm(a) > 1e-6 and np.linalg.norm(b) > 1e-6:
            d = distance(a, b, COSINE)
            assert d == pytest.approx(distance(b, a, COSINE), abs=1e-15)
            assert 0.0 <= d <= 2.0

    def test_pairwise_matches_scalar(self):
        rng = np.random.default_rng(0)
        x, y = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
        for kind in (COSINE, SQEUCLIDEAN):
            m = pairwise_distance(x, y, kind)
            ref = [[distance(a, b, kind) for b in y] for a in x]
            np.testing.assert_allclose(m, ref, atol=1e-12)


class TestSoftmax:
    def test_examples(self):
        np.testing.assert_allclose(softmax([0.0, 0.0]), [0.5, 0.5])
        big = softmax([1000.0, 0.0])
        assert np.isfinite(big).all() and big[0] == pytest.approx(1.0) and big[1] < 1e-300
        np.testing.assert_allclose(softmax([1.0, 0.0]), [0.73106, 0.26894], atol=5e-6)

    @given(arrays(np.float64, st.integers(1, 10), elements=finite), finite)
    def test_sum_and_shift(self, z, c):
        p = softmax(z)
        assert abs(p.sum() - 1.0) <= 1e-12
        np.testing.assert_allclose(softmax(z + c), p, atol=1e-10)

    def test_log_softmax_consistent(self):
        z = np.array([[0.3, -2.0, 5.0], [1.0, 1.0, 1.0]])
        np.testing.assert_allclose(np.exp(log_softmax(z)), softmax(z), atol=1e-15)


class TestHungarian:
    def test_examples(self):
        a, c = hungarian_assign([[1, 2], [2, 1]])
        assert list(a) == [0, 1] and c == 2
        a, c = hungarian_assign(1 - np.eye(3))
        assert list(a) == [0, 1, 2] and c == 0
        _, c = hungarian_assign([[4, 1, 3], [2, 0, 5], [3, 2, 2]])
        assert c == 5

    def test_lexicographic_tie_break(self):
        a, c = hungarian_assign(np.zeros((4, 4)))
        assert list(a) == [0, 1, 2, 3] and c == 0
        a, _ = hungarian_assign([[0, 0, 1], [0, 0, 1], [1, 1, 0]])
        assert list(a) == [0, 1, 2]
        a, _ = hungarian_assign([[1, 0, 0], [0, 1, 1], [0, 1, 1]])
        assert list(a) == [1, 0, 2]

    def test_errors(self):
        with pytest.raises(ValueError, match="square"):
            hungarian_assign(np.zeros((2, 3)))
        with pytest.raises(ValueError):
            hungarian_assign([[np.inf, 0], [0, 0]])
        with pytest.raises(ValueError):
            hungarian_assign(np.zeros((0, 0)))

    def test_against_brute_force(self):
        rng = np.random.default_rng(123)
        for trial in range(300):
            n = int(rng.integers(1, 7))
            c = rng.integers(0, 4, size=(n, n)) if trial % 2 else rng.random((n, n)) * 10
            a, total = hungarian_assign(c)
            ref_a, ref_total = brute_assign(c)
            assert total == pytest.approx(ref_total, abs=1e-9)
            np.testing.assert_array_equal(a, ref_a)

    @settings(max_examples=60)
    @given(st.integers(1, 5).flatmap(lambda n: arrays(np.float64, (n, n), elements=st.floats(0, 100))))
    def test_permutation_property(self, c):
        a, total = hungarian_assign(c)
        assert sorted(a) == list(range(len(c)))
        assert total == pytest.approx(c[np.arange(len(c)), a].sum())

    def test_pad_square(self):
        np.testing.assert_array_equal(pad_square([[1.0, 2.0, 3.0]]), [[1, 2, 3], [0, 0, 0], [0, 0, 0]])
