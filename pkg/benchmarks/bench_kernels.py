"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--rows 2048]

Each kernel is timed with ``timeit`` on identical inputs; the table reports
the best run per backend and the speed-up of the compiled version.
"""

import argparse
import timeit

import numpy as np

from rulqmoe import _kernels_py as py

try:
    from rulqmoe import _ckernels as cy
except ImportError:
    cy = None


def cases(rows: int, k: int, grid: int, rng: np.random.Generator):
    pre = rng.standard_normal((rows, k)) * 3
    base = rng.standard_normal(rows) * 100
    dq = rng.standard_normal((rows, k))
    y = rng.standard_normal(rows) * 50
    q = np.sort(rng.standard_normal((rows, k)) * 50, axis=1)
    taus = np.linspace(0.05, 0.95, k)
    centers = np.sort(rng.standard_normal((rows // 8, k)) * 80, axis=1)
    bw = rng.uniform(2, 20, rows // 8)
    ys = rng.standard_normal((rows // 8, grid)) * 120
    return {
        "softplus": lambda m: m.softplus(pre),
        "quantile_head": lambda m: m.quantile_head(pre, base, 2.5),
        "quantile_head_backward": lambda m: m.quantile_head_backward(pre, dq, 2.5),
        "pinball": lambda m: m.pinball(y, q, taus),
        "mixture_pdf_cdf": lambda m: m.mixture_pdf_cdf(centers, bw, ys),
    }


def best_time(fn, repeat: int) -> float:
    timer = timeit.Timer(fn)
    number, _ = timer.autorange()
    return min(timer.repeat(repeat, number)) / number


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--rows", type=int, default=2048)
    ap.add_argument("--levels", type=int, default=11)
    ap.add_argument("--grid", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    if cy is None:
        print("compiled extension not built; timing the numpy fallback only")
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<24}{'numpy [us]':>12}{'cython [us]':>13}{'speed-up':>10}")
    for name, call in cases(args.rows, args.levels, args.grid, rng).items():
        t_py = best_time(lambda: call(py), args.repeat)
        if cy is None:
            print(f"{name:<24}{t_py * 1e6:>12.1f}{'-':>13}{'-':>10}")
            continue
        t_cy = best_time(lambda: call(cy), args.repeat)
        print(f"{name:<24}{t_py * 1e6:>12.1f}{t_cy * 1e6:>13.1f}{t_py / t_cy:>9.2f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
