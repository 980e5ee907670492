#!/usr/bin/env python3
"""Compare the compiled kernel backend against the pure-numpy fallback.

Times each hot kernel on realistic shapes and checks that both backends
produce bit-identical outputs while timing them.

Usage: python benchmarks/bench_backends.py [--quick]
"""

import argparse
import time

import numpy as np

from mx4train._backend import available_backends


def timeit(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--quick", action="store_true", help="smaller shapes, fewer repeats")
    args = ap.parse_args()

    backends = available_backends()
    if "native" not in backends:
        print("compiled backend not available; nothing to compare")
        return

    scale = 4 if args.quick else 1
    repeats = 2 if args.quick else 3
    r = np.random.default_rng(0)
    big = np.ascontiguousarray(r.normal(size=(4096 // scale, 4096)))
    big32 = big.astype(np.float32)
    a = np.ascontiguousarray(r.normal(size=(256 // scale, 512)).astype(np.float32))
    b = np.ascontiguousarray(r.normal(size=(256 // scale, 512)).astype(np.float32))

    cases = [
        ("quantize_rtn 4Mx f64", lambda k: k.quantize_rtn(big, 32), repeats),
        ("quantize_sr  4Mx f64", lambda k: k.quantize_sr(big, 32, 1234, 0), repeats),
        ("quantize_quest 4Mx", lambda k: k.quantize_quest(big, 32, 1.0 / 16.0), 1),
        ("fwht 4Mx f32 g=32", lambda k: k.fwht(big32, 32), repeats),
        ("gemm_nt 256x512x256 f32", lambda k: k.gemm_nt(a, b), repeats),
    ]

    print(f"{'kernel':28s} {'numpy':>10s} {'native':>10s} {'speedup':>8s}  identical")
    for name, call, reps in cases:
        t_np, out_np = timeit(lambda: call(backends["numpy"]), reps)
        t_nat, out_nat = timeit(lambda: call(backends["native"]), reps)
        if isinstance(out_np, tuple):
            same = all(np.array_equal(x, y) for x, y in zip(out_np, out_nat))
        else:
            same = np.array_equal(out_np, out_nat)
        print(f"{name:28s} {t_np * 1e3:9.1f}ms {t_nat * 1e3:9.1f}ms {t_np / t_nat:7.1f}x  {same}")


if __name__ == "__main__":
    main()
