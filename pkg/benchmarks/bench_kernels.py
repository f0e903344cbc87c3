"""Compare the compiled and numpy bilinear-warp backends.

    python benchmarks/bench_kernels.py [--repeat 5]

Times a training-sized batch (2000 crops of 32x32 from 96x96 images) and one
large single-image warp, checks that both backends agree, and prints the
speedup.
"""

import argparse
import timeit

import numpy as np

from aikd import _kernels_py
from aikd.align import SimilarityTransform

try:
    from aikd import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None


def _cases(gen):
    n = 2000
    imgs = gen.uniform(size=(n, 96, 96, 1))
    invs = np.stack([
        SimilarityTransform(gen.uniform(2.5, 3.2), gen.uniform(-0.2, 0.2), *gen.uniform(10, 20, size=2)).matrix
        for _ in range(n)
    ])
    big = gen.uniform(size=(512, 512, 1))
    big_inv = SimilarityTransform(0.9, 0.3, 40.0, -25.0).matrix
    return [
        ("batch 2000 x (96->32)", "warp_bilinear_batch", (imgs, invs, 32, 32)),
        ("single 512 -> 512", "warp_bilinear", (big, big_inv, 512, 512)),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _compiled is None:
        raise SystemExit("compiled extension not available; run `pip install -e . --no-build-isolation` first")
    gen = np.random.default_rng(0)
    print(f"{'case':<24}{'numpy [ms]':>12}{'cython [ms]':>13}{'speedup':>9}{'max |diff|':>12}")
    for name, fn, fargs in _cases(gen):
        py, cy = getattr(_kernels_py, fn), getattr(_compiled, fn)
        diff = float(np.max(np.abs(py(*fargs) - cy(*fargs))))
        t_py = min(timeit.repeat(lambda: py(*fargs), number=1, repeat=args.repeat)) * 1e3
        t_cy = min(timeit.repeat(lambda: cy(*fargs), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<24}{t_py:>12.2f}{t_cy:>13.2f}{t_py / t_cy:>8.1f}x{diff:>12.1e}")


if __name__ == "__main__":
    main()
