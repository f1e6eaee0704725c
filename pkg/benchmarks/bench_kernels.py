#!/usr/bin/env python
"""Benchmark the JIT kernels against their pure-numpy fallbacks.

Covers the two hot paths: farthest point sampling and hash-grid radius
queries. JIT compilation is triggered before timing.

Usage:
    python benchmarks/bench_kernels.py
    python benchmarks/bench_kernels.py --sizes 5000 20000 80000 --output results.json
"""

import argparse
import json
import time

import numpy as np

from sarfe import kernels


def time_call(fn, *args, repeats=3):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - start)
    return best


def bench_fps(sizes, count, rng):
    print(f"\nFarthest point sampling (budget {count})")
    print(f"{'points':>10} {'numpy (s)':>12} {'numba (s)':>12} {'speedup':>9}")
    rows = []
    for n in sizes:
        xyz = rng.uniform(-40, 40, size=(n, 3))
        t_np = time_call(kernels.fps_numpy, xyz, count)
        if kernels.NUMBA_ENABLED:
            t_nb = time_call(kernels.fps_numba, xyz, count)
            speedup = t_np / t_nb
            print(f"{n:>10} {t_np:>12.4f} {t_nb:>12.4f} {speedup:>8.1f}x")
        else:
            t_nb, speedup = None, None
            print(f"{n:>10} {t_np:>12.4f} {'-':>12} {'-':>9}")
        rows.append({"points": n, "numpy_s": t_np, "numba_s": t_nb, "speedup": speedup})
    return rows


def bench_radius(sizes, n_queries, radius, rng):
    print(f"\nHash-grid radius query ({n_queries} queries, r={radius})")
    print(f"{'points':>10} {'numpy (s)':>12} {'numba (s)':>12} {'speedup':>9}")
    rows = []
    for n in sizes:
        xyz = rng.uniform(-40, 40, size=(n, 3))
        queries = rng.uniform(-40, 40, size=(n_queries, 3))
        grid = kernels.build_grid(xyz, radius)
        t_np = time_call(kernels.radius_query_numpy, queries, xyz, radius, *grid)
        if kernels.NUMBA_ENABLED:
            t_nb = time_call(kernels.radius_query_numba, queries, xyz, radius, *grid)
            speedup = t_np / t_nb
            print(f"{n:>10} {t_np:>12.4f} {t_nb:>12.4f} {speedup:>8.1f}x")
        else:
            t_nb, speedup = None, None
            print(f"{n:>10} {t_np:>12.4f} {'-':>12} {'-':>9}")
        rows.append({"points": n, "numpy_s": t_np, "numba_s": t_nb, "speedup": speedup})
    return rows


def main():
    parser = argparse.ArgumentParser(description="Benchmark JIT vs numpy kernel paths")
    parser.add_argument("--sizes", type=int, nargs="+", default=[5000, 20000, 80000])
    parser.add_argument("--fps-count", type=int, default=2048)
    parser.add_argument("--queries", type=int, default=648, help="216 grid points x 3 radii")
    parser.add_argument("--radius", type=float, default=0.8)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--output", help="write results as JSON")
    args = parser.parse_args()

    print(f"numba available: {kernels.NUMBA_AVAILABLE}, enabled: {kernels.NUMBA_ENABLED}")
    if kernels.NUMBA_ENABLED:
        print("warming up JIT...")
        kernels.warmup()

    rng = np.random.default_rng(args.seed)
    results = {
        "numba_enabled": kernels.NUMBA_ENABLED,
        "fps": bench_fps(args.sizes, args.fps_count, rng),
        "radius_query": bench_radius(args.sizes, args.queries, args.radius, rng),
    }

    if args.output:
        with open(args.output, "w") as f:
            json.dump(results, f, indent=2)
        print(f"\nresults written to {args.output}")


if __name__ == "__main__":
    main()
