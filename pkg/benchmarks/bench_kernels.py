"""Time the numba kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py [--sizes 32 64 128 256] [--repeat 5]

Each row reports the best-of-``repeat`` time per call for one kernel on a
square mask of the given side, after a warm-up call that also triggers numba
compilation. Outputs of both flavours are checked for equality first.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from promptseg import _accel, metrics


def disc_pair(n: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:n, 0:n]
    a = ((yy - 0.45 * n) ** 2 + (xx - 0.5 * n) ** 2 <= (0.3 * n) ** 2).astype(np.uint8)
    b = ((yy - 0.55 * n) ** 2 + (xx - 0.48 * n) ** 2 <= (0.28 * n) ** 2).astype(np.uint8)
    return a, b


def best(fn, repeat: int) -> float:
    number = 1
    while timeit.timeit(fn, number=number) < 0.05 and number < 10_000:
        number *= 4
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def with_flavour(flag: bool, fn):
    def run():
        old = _accel.USE_NUMBA
        _accel.USE_NUMBA = flag
        try:
            return fn()
        finally:
            _accel.USE_NUMBA = old
    return run


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--sizes", type=int, nargs="+", default=[32, 64, 128, 256])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not _accel.HAS_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")

    print(f"{'kernel':<10}{'size':>6}{'numba (us)':>14}{'numpy (us)':>14}{'speed-up':>10}")
    for n in args.sizes:
        a, b = disc_pair(n)
        edge = metrics._boundary_np(a)
        cases = {
            "boundary": (lambda: metrics._boundary_nb(a), lambda: metrics._boundary_np(a)),
            "edt_sq": (lambda: metrics._edt_sq_nb(edge), lambda: metrics._edt_sq_np(edge)),
            "nsd": (with_flavour(True, lambda: metrics.nsd(a, b)), with_flavour(False, lambda: metrics.nsd(a, b))),
            "assd": (with_flavour(True, lambda: metrics.assd(a, b)), with_flavour(False, lambda: metrics.assd(a, b))),
        }
        for name, (fast, slow) in cases.items():
            x, y = fast(), slow()
            if not np.array_equal(np.asarray(x), np.asarray(y)):
                raise SystemExit(f"{name} at size {n}: flavours disagree")
            t_nb, t_np = best(fast, args.repeat), best(slow, args.repeat)
            print(f"{name:<10}{n:>6}{t_nb * 1e6:>14.1f}{t_np * 1e6:>14.1f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
