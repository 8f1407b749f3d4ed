#!/usr/bin/env python3
"""Benchmark the fused Adam kernel: JIT backend vs pure-numpy fallback.

Runs both implementations on identical state across a range of subgroup
sizes, reports wall time per call and the throughput ratio, and verifies
the results stay bit-identical (they must — the fallback is order-matched).

Usage::

    python3 benchmarks/bench_kernels.py [--sizes 4096,131072,2097152] [--repeat 20]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from optistate import kernels


def _state(n: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    return (
        rng.normal(0, 0.02, n).astype(np.float32),
        rng.normal(0, 1e-3, n).astype(np.float32),
        (rng.random(n) * 1e-4).astype(np.float32),
        rng.normal(0, 1.0, n).astype(np.float32),
    )


def _scalars(step: int = 3):
    return (
        np.float32(1e-3),
        np.float32(0.9),
        np.float32(0.999),
        np.float32(1e-8),
        np.float32(1.0 - 0.9**step),
        np.float32(1.0 - 0.999**step),
    )


def _time_call(fn, args, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument(
        "--sizes",
        default="4096,131072,2097152",
        help="comma-separated element counts",
    )
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    sizes = [int(s) for s in args.sizes.split(",")]

    if not kernels.HAS_NUMBA:
        print("numba is not importable; only the numpy path can run")
        return 1

    scalars = _scalars()
    # Warm the JIT once outside the timed region.
    p, m, v, g = _state(64)
    kernels._adam_step_jit(p, m, v, g, *scalars)

    print(f"{'n':>10}  {'numpy':>12}  {'numba':>12}  {'numpy/numba':>12}  bitwise")
    for n in sizes:
        p0, m0, v0, g = _state(n)

        p1, m1, v1 = p0.copy(), m0.copy(), v0.copy()
        t_np = _time_call(
            kernels._adam_step_numpy, (p1, m1, v1, g, *scalars), args.repeat
        )
        p2, m2, v2 = p0.copy(), m0.copy(), v0.copy()
        t_nb = _time_call(
            kernels._adam_step_jit, (p2, m2, v2, g, *scalars), args.repeat
        )

        identical = (
            p1.tobytes() == p2.tobytes()
            and m1.tobytes() == m2.tobytes()
            and v1.tobytes() == v2.tobytes()
        )
        print(
            f"{n:>10}  {t_np * 1e6:>10.1f}us  {t_nb * 1e6:>10.1f}us  "
            f"{t_np / t_nb:>12.2f}  {'yes' if identical else 'NO'}"
        )
        if not identical:
            return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
