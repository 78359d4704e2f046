"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--points 4096] [--repeat 5]

Running with CMFLOW_DISABLE_NUMBA=1 only changes the default backend; this
script switches explicitly and times both.
"""
import argparse
import time

import numpy as np

from cmflow import _accel
from cmflow.geometry import icp_ego
from cmflow.simworld import SimConfig, generate_sequence


def best_of(fn, repeat):
    fn()  # warm-up (numba compiles on first call)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(n, rng):
    pts = rng.uniform(-20, 20, (n, 3))
    qry = pts + rng.normal(0, 0.3, pts.shape)
    vals = rng.normal(size=(8 * n, 32))
    rows = rng.integers(0, n, 8 * n)
    seq = generate_sequence(SimConfig(n_frames=2, n_static=n), 0)
    a, b = seq.frames[0].coords, seq.frames[1].coords
    return {
        "knn k=16": lambda: _accel.knn(qry, pts, 16),
        "ball_group 2 scales": lambda: _accel.ball_group(qry, pts, (1.0, 2.0), (8, 16)),
        "nearest": lambda: _accel.nearest(qry, pts),
        "scatter_add_rows": lambda: _accel.scatter_add_rows(vals, rows, n),
        f"icp_ego ({a.shape[0]} pts)": lambda: icp_ego(a, b),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=4096)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    fns = cases(args.points, np.random.default_rng(args.seed))
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    print(f"{'kernel':<24}{'numpy ms':>11}{'numba ms':>11}{'speedup':>9}")
    for name, fn in fns.items():
        _accel.set_backend("numpy")
        t_np = best_of(fn, args.repeat)
        _accel.set_backend("numba")
        t_nb = best_of(fn, args.repeat)
        print(f"{name:<24}{t_np * 1e3:>11.2f}{t_nb * 1e3:>11.2f}{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
