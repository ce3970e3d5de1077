"""Compare the numpy and numba kernel backends.

    python benchmarks/bench_kernels.py [--n 20000] [--dims 3,16,64,256]

Times distances, weighted gradients and the fused sigmoid-gradient kernel
for both metric families and prints one row per (kernel, d, backend) plus
the numba speed-up.
"""
import argparse
import time

import numpy as np

from confsets import _kernels
from confsets._alloc import tune


def _best(fn, repeats):
    fn()  # warm-up, and compilation for numba
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(n, d, rng):
    diffs = rng.normal(size=(n, d))
    m, p = rng.uniform(0.5, 1.5, d), rng.uniform(1.5, 3.0, d)
    A = np.eye(d) + 0.05 * rng.normal(size=(d, d))
    M = A @ A.T
    w = np.full(n, 1.0 / n)
    K = _kernels
    return {
        "gen_dist": lambda: K.gen_dist(diffs, m, p),
        "gen_grad": lambda: K.gen_grad(diffs, m, p, w),
        "gen_sigmoid_grad": lambda: K.gen_sigmoid_grad(diffs, m, p, float(d), 7.0),
        "single_dist": lambda: K.single_dist(diffs, M, 2.5),
        "single_grad": lambda: K.single_grad(diffs, M, 2.5, w),
        "single_sigmoid_grad": lambda: K.single_sigmoid_grad(diffs, M, 2.5, float(d), 7.0),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=20000)
    ap.add_argument("--dims", default="3,16,64,256")
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args(argv)
    tune()
    backends = ["numpy"] + (["numba"] if _kernels.numba_available() else [])
    print(f"{'kernel':<22}{'d':>5}" + "".join(f"{b + ' ms':>12}" for b in backends) + f"{'speed-up':>10}")
    for d in [int(x) for x in args.dims.split(",")]:
        rng = np.random.default_rng(d)
        times = {}
        for b in backends:
            _kernels.use(b)
            for name, fn in cases(args.n, d, rng).items():
                times[(name, b)] = _best(fn, args.repeats)
        _kernels.use("numpy")
        for name in cases(1, 1, rng):
            row = [times[(name, b)] * 1e3 for b in backends]
            sp = f"{row[0] / row[1]:>9.2f}x" if len(row) == 2 else ""
            print(f"{name:<22}{d:>5}" + "".join(f"{t:>12.3f}" for t in row) + sp)


if __name__ == "__main__":
    main()
