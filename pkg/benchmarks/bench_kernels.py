"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints one row per kernel with the best-of-N wall time for each backend.
"""

import argparse
import timeit

import numpy as np

from detfuse import _fallback

try:
    from detfuse import _kernels
except ImportError:
    _kernels = None


def random_boxes(rng, n, extent=1000.0):
    xy = rng.uniform(0, extent, size=(n, 2))
    wh = rng.uniform(5, 80, size=(n, 2))
    return np.hstack([xy, xy + wh])


def cases(rng):
    a, b = random_boxes(rng, 300), random_boxes(rng, 300)
    crowd = random_boxes(rng, 2000, extent=400.0)
    order = np.argsort(-rng.random(len(crowd)), kind="stable")
    crowd = np.ascontiguousarray(crowd[order])
    padded = rng.integers(0, 256, size=(1030, 1030)).astype(np.int64)
    lum = rng.integers(60, 180, size=(1024, 1024)).astype(np.uint8)
    luts = _fallback.clahe_luts(lum, 8, 8, 1024)
    return {
        "iou_matrix 300x300": ("iou_matrix", (a, b)),
        "nms_keep 2000 boxes": ("nms_keep", (crowd, 0.5)),
        "box_sum 1024^2, 7x7": ("box_sum", (padded, 7, 7)),
        "clahe_luts 1024^2, 8x8": ("clahe_luts", (lum, 8, 8, 1024)),
        "clahe_interp 1024^2": ("clahe_interp", (lum, luts, 128, 128)),
    }


def best_of(fn, args, repeat):
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<26}{'python (ms)':>14}{'cython (ms)':>14}{'speedup':>10}")
    for label, (name, fargs) in cases(rng).items():
        py = best_of(getattr(_fallback, name), fargs, args.repeat)
        if _kernels is None:
            print(f"{label:<26}{py * 1e3:>14.2f}{'n/a':>14}{'':>10}")
            continue
        cy = best_of(getattr(_kernels, name), fargs, args.repeat)
        print(f"{label:<26}{py * 1e3:>14.2f}{cy * 1e3:>14.2f}{py / cy:>9.1f}x")


if __name__ == "__main__":
    main()
