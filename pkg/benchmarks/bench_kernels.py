"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from keycongeal import _pykernels

try:
    from keycongeal import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    n = 20000
    start = rng.uniform(0, 320, (n, 2))
    end = start + rng.normal(0, 1, (n, 2))
    weights = rng.uniform(0.1, 1, n)
    image = rng.uniform(0, 1, (240, 320))
    xs, ys = rng.uniform(-5, 325, 76800), rng.uniform(-5, 245, 76800)
    px, py = rng.uniform(0, 320, 600), rng.uniform(0, 240, 600)
    sig = rng.choice([5.0, 10.0, 20.0], 600)
    return {
        "normal_equations (20k links)": lambda k: k.normal_equations(start, end, weights),
        "bilinear_sample (320x240)": lambda k: k.bilinear_sample(image, xs, ys),
        "splat_gaussians (600 links)": lambda k: k.splat_gaussians(320, 240, px, py, sig),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':32s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fn in cases(rng).items():
        py = min(timeit.repeat(lambda: fn(_pykernels), number=1, repeat=args.repeat)) * 1e3
        if _ckernels is None:
            print(f"{name:32s} {py:10.2f} {'n/a':>10s} {'':>8s}")
            continue
        cy = min(timeit.repeat(lambda: fn(_ckernels), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:32s} {py:10.2f} {cy:10.2f} {py / cy:7.1f}x")


if __name__ == "__main__":
    main()
