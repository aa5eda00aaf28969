"""Timing comparison: compiled kernels vs the numpy fallback.

Run with ``python3 benchmarks/bench_kernels.py [--repeats N]``. Each op
is timed over best-of-N wall clock on realistic shapes (batch of patch
grids at backbone width). Prints one row per (op, shape, dtype) with
both timings and the speedup factor.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from conceptmix.kernels import fallback

try:
    from conceptmix.kernels import compiled
except ImportError:
    compiled = None

CONV_SHAPES = ((8, 4, 4, 32), (32, 4, 4, 64), (16, 8, 8, 128))
GATE_SHAPES = ((128, 3), (2048, 3), (4096, 8))


def best_of(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_case(name: str, make_args, run, repeats: int, dtype) -> None:
    args = make_args(dtype)
    run(fallback, *args)  # warm both paths before timing
    t_fb = best_of(lambda: run(fallback, *args), repeats)
    if compiled is None:
        print(f"{name:<44s} fallback {t_fb * 1e6:9.1f} us   compiled: not built")
        return
    run(compiled, *args)
    t_c = best_of(lambda: run(compiled, *args), repeats)
    ratio = t_fb / t_c if t_c > 0 else float("inf")
    print(f"{name:<44s} fallback {t_fb * 1e6:9.1f} us   "
          f"compiled {t_c * 1e6:9.1f} us   x{ratio:5.2f}")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=20,
                        help="best-of-N timing repeats")
    opts = parser.parse_args()
    rng = np.random.default_rng(0)

    for shape in CONV_SHAPES:
        for dtype in (np.float32, np.float64):
            def conv_args(dt, shape=shape):
                x = rng.normal(size=shape).astype(dt)
                w = rng.normal(size=(shape[-1], 3, 3)).astype(dt)
                b = rng.normal(size=shape[-1]).astype(dt)
                return x, w, b

            bench_case(f"dwconv3x3 fwd {shape} {np.dtype(dtype).name}",
                       conv_args,
                       lambda m, x, w, b: m.dwconv3x3_forward(x, w, b),
                       opts.repeats, dtype)
            bench_case(f"dwconv3x3 bwd {shape} {np.dtype(dtype).name}",
                       conv_args,
                       lambda m, x, w, b: m.dwconv3x3_backward(x, x, w),
                       opts.repeats, dtype)

    for shape in GATE_SHAPES:
        for dtype in (np.float32, np.float64):
            def gate_args(dt, shape=shape):
                g = rng.uniform(size=shape).astype(dt)
                c = rng.uniform(0.0, 0.3, size=(shape[0], 1)).astype(dt)
                return g, c

            bench_case(f"gate_filter fwd {shape} {np.dtype(dtype).name}",
                       gate_args,
                       lambda m, g, c: m.gate_filter_forward(g, c),
                       opts.repeats, dtype)
            bench_case(f"importance_norm fwd {shape} {np.dtype(dtype).name}",
                       gate_args,
                       lambda m, g, c: m.importance_normalize_forward(g),
                       opts.repeats, dtype)


if __name__ == "__main__":
    main()
