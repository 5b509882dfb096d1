"""Compare the numba and numpy im2col/col2im paths on convolution-sized inputs.

    python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import time

import numpy as np

from mrgan import _kernels

CASES = [
    # (batch, channels, extent, kernel, stride)
    (16, 1, 34, 3, 1),
    (16, 32, 18, 3, 1),
    (32, 16, 20, 5, 2),
    (8, 64, 10, 3, 1),
]


def _time(fn, repeat):
    fn()  # warm-up (and numba compilation)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1e3


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'case':<24}{'op':<8}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}  equal")
    for b, c, n, k, s in CASES:
        x = rng.standard_normal((b, c, n, n)).astype(np.float32)
        cols = _kernels.im2col_numpy(x, k, s)
        pairs = {
            "im2col": (lambda: _kernels.im2col_numpy(x, k, s), lambda: _kernels.im2col_numba(x, k, s)),
            "col2im": (lambda: _kernels.col2im_numpy(cols, x.shape, k, s),
                       lambda: _kernels.col2im_numba(cols, x.shape, k, s)),
        }
        for op, (f_np, f_nb) in pairs.items():
            t_np, t_nb = _time(f_np, args.repeat), _time(f_nb, args.repeat)
            same = np.array_equal(f_np(), f_nb())
            case = f"{b}x{c}x{n}x{n} k{k} s{s}"
            print(f"{case:<24}{op:<8}{t_np:>10.3f}{t_nb:>10.3f}{t_np / t_nb:>8.2f}x  {same}")


if __name__ == "__main__":
    main()
