import os
import subprocess
import sys

import numpy as np
import pytest

from growmerge import _kernels as K

pytestmark = pytest.mark.skipif(not K.HAVE_NUMBA, reason="numba not installed")


def _unit_rows(rng, n, d):
    z = rng.normal(size=(n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


class TestBackendsAgree:
    def test_hungarian(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n = int(rng.integers(1, 9))
            c = rng.integers(0, 5, size=(n, n)).astype(np.float64)
            p_a, u_a, v_a = K.hungarian_numba(c)
            p_b, u_b, v_b = K.hungarian_numpy(c)
            # both are optimal; costs must agree even if tied solutions differ
            assert c[p_a, np.arange(n)].sum() == c[p_b, np.arange(n)].sum()
            assert u_a.sum() + v_a.sum() == pytest.approx(u_b.sum() + v_b.sum())

    def test_lexmin(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            n = int(rng.integers(1, 8))
            perm = rng.permutation(n)
            tight = rng.random((n, n)) < 0.4
            tight[np.arange(n), perm] = True
            np.testing.assert_array_equal(K.lexmin_tight_numba(tight, perm.astype(np.int64)),
                                          K.lexmin_tight_numpy(tight, perm.astype(np.int64)))

    def test_herding(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            n = int(rng.integers(1, 30))
            emb = _unit_rows(rng, n, 6)
            m = int(rng.integers(1, n + 1))
            np.testing.assert_array_equal(K.herding_numba(emb, m), K.herding_numpy(emb, m))

    def test_nearest(self):
        rng = np.random.default_rng(3)
        pts, cents = rng.normal(size=(40, 5)), rng.normal(size=(6, 5))
        cents[3] = cents[1]  # duplicate centroid: lowest index wins in both
        ia, da = K.nearest_numba(pts, cents)
        ib, db = K.nearest_numpy(pts, cents)
        np.testing.assert_array_equal(ia, ib)
        np.testing.assert_allclose(da, db, rtol=1e-12, atol=1e-12)
        assert not (ia == 3).any()

    def test_kth_neighbor(self):
        rng = np.random.default_rng(4)
        for n in (1, 2, 5, 30):
            emb = rng.normal(size=(n, 4))
            for j in (1, 3, 15):
                np.testing.assert_allclose(K.kth_neighbor_numba(emb, j), K.kth_neighbor_numpy(emb, j),
                                           rtol=1e-12, atol=1e-12)

    def test_wta(self):
        rng = np.random.default_rng(5)
        z = rng.normal(size=(50, 8))
        z[1] = z[0]
        z[2, :] = 1.0  # all ties: lowest indices win
        np.testing.assert_array_equal(K.wta_codes_numba(z, 3), K.wta_codes_numpy(z, 3))
        np.testing.assert_array_equal(K.wta_codes_numpy(z, 3)[2], [0, 1, 2])
        np.testing.assert_array_equal(K.wta_matrix_numba(z, 3), K.wta_matrix_numpy(z, 3))


class TestBackendFlag:
    @pytest.mark.parametrize("flag,expected", [("1", "numpy"), ("0", "numba")])
    def test_env_flag_selects_backend(self, flag, expected):
        env = dict(os.environ, GROWMERGE_PURE_NUMPY=flag)
        out = subprocess.run([sys.executable, "-c", "from growmerge import _kernels; print(_kernels.BACKEND)"],
                             env=env, capture_output=True, text=True, check=True)
        assert out.stdout.strip() == expected
