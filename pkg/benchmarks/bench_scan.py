"""Time the compiled recurrence scan against the pure-Python fallback.

Usage: ``python benchmarks/bench_scan.py [--sizes 1000,10000] [--repeat 5]``
"""
import argparse
import timeit

import numpy as np

from rdsmanifold import kernels


def bench(backend, N, m, cols, repeat):
    rng = np.random.default_rng(0)
    a = np.exp(-0.01 * rng.uniform(0.5, 2.0, (N, m)))
    x = rng.standard_normal((N, m, cols))
    be = kernels.get_backend(backend)
    fn = lambda: (kernels.recur_forward(a, x, backend=be), kernels.recur_backward(a, x, backend=be))  # noqa: E731
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="1000,10000,50000")
    ap.add_argument("--modes", type=int, default=3)
    ap.add_argument("--cols", type=int, default=4)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    names = sorted(kernels.BACKENDS)
    print(f"default backend: {kernels.BACKEND}; available: {', '.join(names)}")
    print(f"{'N':>8} " + " ".join(f"{n + ' [ms]':>14}" for n in names) + f" {'speedup':>9}")
    for N in (int(s) for s in args.sizes.split(",")):
        t = {n: bench(n, N, args.modes, args.cols, args.repeat) for n in names}
        sp = t["python"] / t["cython"] if "cython" in t else float("nan")
        print(f"{N:>8} " + " ".join(f"{1e3 * t[n]:>14.3f}" for n in names) + f" {sp:>8.1f}x")


if __name__ == "__main__":
    main()
