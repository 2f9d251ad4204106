"""Time the compiled im2col/col2im kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Shapes follow the default backbone's conv layers on a 5-image mini-batch.
Both backends are checked for bitwise-equal output before timing.
"""

import argparse
import timeit

import numpy as np

from miqa._ext import _fallback

try:
    from miqa._ext import _im2col as compiled
except ImportError:
    compiled = None

# (N, H, W, C, kernel, stride, pad)
SHAPES = [
    (5, 64, 64, 3, 3, 2, 1),
    (5, 32, 32, 16, 3, 2, 1),
    (5, 16, 16, 32, 3, 2, 1),
    (5, 8, 8, 64, 3, 2, 1),
]


def bench(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if compiled is None:
        print("compiled extension not built; only the numpy fallback is available")
    rng = np.random.default_rng(0)
    print(f"{'shape':<24}{'op':<8}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}")
    for n, h, w, c, k, s, p in SHAPES:
        x = rng.standard_normal((n, h, w, c)).astype(np.float32)
        cols = _fallback.im2col(x, k, k, s, p)
        cases = {
            "im2col": (lambda m: m.im2col(x, k, k, s, p)),
            "col2im": (lambda m: m.col2im(cols, n, h, w, c, k, k, s, p)),
        }
        for op, call in cases.items():
            t_np = bench(lambda: call(_fallback), args.repeat)
            label = f"{n}x{h}x{w}x{c} k{k}s{s}"
            if compiled is None:
                print(f"{label:<24}{op:<8}{t_np:>10.3f}{'-':>11}{'-':>9}")
                continue
            if call(compiled).tobytes() != call(_fallback).tobytes():
                raise SystemExit(f"{op} {label}: backends disagree")
            t_cy = bench(lambda: call(compiled), args.repeat)
            print(f"{label:<24}{op:<8}{t_np:>10.3f}{t_cy:>11.3f}{t_np / t_cy:>8.1f}x")


if __name__ == "__main__":
    main()
