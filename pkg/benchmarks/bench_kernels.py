"""Compare the compiled and numpy power-flow sweeps.

    python benchmarks/bench_kernels.py [--repeat 20] [--iters 10]

Prints one line per (grid, batch) with the mean time per call of each
backend and the speed-up, plus the max absolute difference between them.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from gridvolt.powerflow import BACKEND, load_grid, sweep_fixed
from gridvolt.powerflow import kernels


def time_call(fn, repeat):
    fn()  # warm-up
    best = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best.append(time.perf_counter() - t0)
    return float(np.mean(best))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--iters", type=int, default=10, help="sweeps per call")
    ap.add_argument("--grids", nargs="+", default=["ieee13", "ieee34", "ieee123"])
    ap.add_argument("--batches", type=int, nargs="+", default=[1, 32, 256])
    args = ap.parse_args(argv)

    have_c = kernels.compiled is not None
    print(f"default backend: {BACKEND}; compiled kernel available: {have_c}")
    print(f"{'grid':8s} {'batch':>6s} {'python ms':>10s} {'cython ms':>10s} {'speed-up':>9s} {'max |dv|':>10s}")
    rng = np.random.default_rng(0)
    for name in args.grids:
        grid = load_grid(name)
        p0 = grid.p_nominal_kw * 1e3 / grid.s_base
        q0 = grid.q_nominal_kvar * 1e3 / grid.s_base
        for b in args.batches:
            scale = rng.uniform(0.5, 1.2, size=(b, grid.n_bus))
            p, q = np.ascontiguousarray(p0 * scale), np.ascontiguousarray(q0 * scale)
            t_py = time_call(lambda: sweep_fixed(grid, p, q, args.iters, backend="python"), args.repeat)
            if have_c:
                t_c = time_call(lambda: sweep_fixed(grid, p, q, args.iters, backend="cython"), args.repeat)
                a = sweep_fixed(grid, p, q, args.iters, backend="python")
                c = sweep_fixed(grid, p, q, args.iters, backend="cython")
                diff = max(np.abs(a[0] - c[0]).max(), np.abs(a[1] - c[1]).max())
                print(f"{name:8s} {b:6d} {t_py * 1e3:10.4f} {t_c * 1e3:10.4f} {t_py / t_c:9.2f} {diff:10.2e}")
            else:
                print(f"{name:8s} {b:6d} {t_py * 1e3:10.4f} {'-':>10s} {'-':>9s} {'-':>10s}")


if __name__ == "__main__":
    main()
