"""Time the numba and numpy variants of every hot kernel on the same inputs.

    python3 benchmarks/bench_kernels.py [--repeat N]

Also times one full CI fixture run under each backend in a subprocess
(the backend is chosen at import time from GROWMERGE_PURE_NUMPY).
"""
import argparse
import os
import subprocess
import sys
import time

import numpy as np

from growmerge import _kernels as K


def _inputs(rng):
    emb = rng.normal(size=(400, 32))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    return {
        "hungarian": (rng.integers(0, 50, size=(60, 60)).astype(np.float64),),
        "herding": (emb[:200].copy(), 40),
        "nearest": (emb, emb[:10].copy()),
        "kth_neighbor": (emb[:200].copy(), 15),
        "wta_codes": (emb[:128].copy(), 5),
        "wta_matrix": (emb[:128].copy(), 5),
    }


def _best(fn, args, repeat):
    fn(*args)  # compile / warm up
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def _full_run(pure: bool) -> float:
    env = dict(os.environ, GROWMERGE_PURE_NUMPY="1" if pure else "0")
    code = ("import time;from growmerge.runner import RunConfig, run_experiment;"
            "c=RunConfig.from_dict({'grow':{'epsilon':0.3}});t=time.perf_counter();"
            "run_experiment(c, write=False);print(time.perf_counter()-t)")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--skip-full", action="store_true")
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        sys.exit("numba is not importable; nothing to compare")
    inputs = _inputs(np.random.default_rng(0))
    print(f"{'kernel':>14s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, a in inputs.items():
        tn = _best(getattr(K, f"{name}_numba"), a, args.repeat)
        tp = _best(getattr(K, f"{name}_numpy"), a, args.repeat)
        print(f"{name:>14s} {tn * 1e3:10.3f} {tp * 1e3:10.3f} {tp / tn:8.2f}")
    if not args.skip_full:
        tn, tp = _full_run(False), _full_run(True)
        print(f"{'full run':>14s} {tn * 1e3:10.0f} {tp * 1e3:10.0f} {tp / tn:8.2f}")


if __name__ == "__main__":
    main()
