"""Time the numba kernels against their pure-numpy fallbacks.

    python benchmarks/bench_kernels.py --repeat 20

Each kernel is run once untimed on the numba path so JIT compilation does not
count, then timed on identical inputs with both paths.
"""

from __future__ import annotations

import argparse
import os
import timeit

import numpy as np

from lcdg import _kernels as K


def cases(rng: np.random.Generator) -> dict:
    x = rng.standard_normal((16, 16, 34, 34)).astype(np.float32)
    ho = wo = 32
    cols = K.im2col(x, 3, 1, ho, wo)
    img = rng.random((3, 32, 32))
    points = rng.random((1024, 3))
    centers = rng.random((8, 3))
    mask = rng.random((32, 32)) > 0.7
    return {
        "col2im 16x16x32x32 k3": (lambda: K.col2im(cols, x.shape, 3, 1, ho, wo)),
        "median_filter 3x32x32 k3": (lambda: K.median_filter(img, 3)),
        "kmeans_assign 1024x8": (lambda: K.assign(points, centers)),
        "dilate 32x32 r2": (lambda: K.dilate(mask, 2)),
        "erode 32x32 r2": (lambda: K.erode(mask, 2)),
    }


def bench(repeat: int, number: int) -> list[tuple[str, float, float]]:
    rng = np.random.default_rng(0)
    rows = []
    for name, fn in cases(rng).items():
        times = {}
        for flag in ("1", "0"):
            os.environ["LCDG_NUMBA"] = flag
            fn()
            times[flag] = min(timeit.repeat(fn, repeat=repeat, number=number)) / number
        rows.append((name, times["1"], times["0"]))
    os.environ.pop("LCDG_NUMBA", None)
    return rows


def main(argv: list[str] | None = None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=10)
    parser.add_argument("--number", type=int, default=5)
    args = parser.parse_args(argv)
    if not K._HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    print(f"{'kernel':28s} {'numba us':>10s} {'numpy us':>10s} {'speedup':>8s}")
    for name, nb, npy in bench(args.repeat, args.number):
        print(f"{name:28s} {nb * 1e6:10.1f} {npy * 1e6:10.1f} {npy / nb:8.2f}")


if __name__ == "__main__":
    main()
