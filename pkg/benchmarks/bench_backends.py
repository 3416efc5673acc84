"""Forward and backward Bi-WKV wall time: numba kernels vs the numpy fallback.

    python benchmarks/bench_backends.py --T 1024,4096,16384 --C 64 --reps 7
"""

import argparse
import time

import numpy as np

from vrwkv.kernel import biwkv_backward, biwkv_forward


def median_time(fn, reps):
    fn()  # warm-up, also triggers JIT compilation
    ts = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    return float(np.median(ts))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--T", default="1024,4096,16384")
    ap.add_argument("--C", type=int, default=64)
    ap.add_argument("--reps", type=int, default=7)
    ap.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    print(f"{'T':>7} {'pass':>8} {'numba s':>11} {'numpy s':>11} {'speedup':>8}")
    for T in (int(t) for t in args.T.split(",")):
        k, v, gy = rng.standard_normal((3, T, args.C)).astype(args.dtype)
        w, u = rng.uniform(-1, 1, (2, args.C)).astype(args.dtype)
        row = {}
        for backend in ("numba", "numpy"):
            _, ctx = biwkv_forward(k, v, w, u, backend=backend)
            row[backend] = (
                median_time(lambda: biwkv_forward(k, v, w, u, backend=backend), args.reps),
                median_time(lambda: biwkv_backward(ctx, gy, backend=backend), args.reps),
            )
        for i, name in enumerate(("forward", "backward")):
            a, b = row["numba"][i], row["numpy"][i]
            print(f"{T:>7} {name:>8} {a:>11.4e} {b:>11.4e} {b / a:>7.1f}x")


if __name__ == "__main__":
    main()
