"""Compare the numba and pure-numpy LBP/HOG kernels.

    python3 benchmarks/bench_kernels.py [--images 200] [--size 64]

Both paths are checked for identical output before timing.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from mixnet_pad.features import _kernels as k

CASES = {
    "lbp(8,1)": (lambda im, impl: getattr(k, f"lbp_codes_{impl}")(im, 8, 1.0)),
    "lbp(8,2)": (lambda im, impl: getattr(k, f"lbp_codes_{impl}")(im, 8, 2.0)),
    "lbp(16,2)": (lambda im, impl: getattr(k, f"lbp_codes_{impl}")(im, 16, 2.0)),
    "hog cells": (lambda im, impl: getattr(k, f"hog_cells_{impl}")(im, 16)),
}


def bench(fn, images, impl, repeat=3) -> float:
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        for im in images:
            fn(im, impl)
        best = min(best, time.perf_counter() - t)
    return best / len(images)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--images", type=int, default=200)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if not k.HAVE_NUMBA:
        raise SystemExit("numba is not installed")
    rng = np.random.default_rng(args.seed)
    images = [rng.integers(0, 256, (args.size, args.size)).astype(np.float64)
              for _ in range(args.images)]
    print(f"{args.images} images of {args.size}x{args.size}, best of 3, microseconds per image")
    print(f"{'kernel':<10} {'numpy':>10} {'numba':>10} {'speedup':>8}")
    for name, fn in CASES.items():
        a, b = fn(images[0], "numpy"), fn(images[0], "numba")   # also JIT warm-up
        if a.shape != b.shape or not np.allclose(a, b, rtol=1e-12, atol=1e-9):
            raise SystemExit(f"{name}: numba and numpy kernels disagree")
        t_np = bench(fn, images, "numpy")
        t_nb = bench(fn, images, "numba")
        print(f"{name:<10} {t_np * 1e6:>10.1f} {t_nb * 1e6:>10.1f} {t_np / t_nb:>7.1f}x")


if __name__ == "__main__":
    main()
