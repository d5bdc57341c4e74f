"""Time the compiled and numpy kernel backends on representative inputs.

    python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from pgalab import kernels


def cases(rng):
    mats = rng.normal(size=(1024, 2, 2))
    mats8 = rng.normal(size=(256, 8, 8))
    x = rng.normal(size=(2000, 2))
    bw = np.array([0.5, 1.0, 2.0])
    p = rng.normal(size=256 * 256)
    v = np.zeros_like(p)
    g = rng.normal(size=p.size)
    return {
        "lu_logabsdet 1024x2x2": lambda m: m.lu_logabsdet(mats, 1e-12),
        "lu_logabsdet 256x8x8": lambda m: m.lu_logabsdet(mats8, 1e-12),
        "pairwise_sq_dists 2000x2000": lambda m: m.pairwise_sq_dists(x, x),
        "gaussian_kernel 2000x2000x3": lambda m: m.gaussian_kernel(x, x, bw),
        "momentum_update 65536": lambda m: m.momentum_update(p, v, g, 1e-3, 0.9),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = kernels.available_backends()
    rng = np.random.default_rng(0)
    names = sorted(backends)
    print(f"{'kernel':<30}" + "".join(f"{n:>12}" for n in names) + ("     speedup" if len(names) > 1 else ""))
    for label, fn in cases(rng).items():
        times = {}
        for name in names:
            mod = backends[name]
            number = 3
            times[name] = min(timeit.repeat(lambda: fn(mod), number=number, repeat=args.repeat)) / number
        row = f"{label:<30}" + "".join(f"{times[n] * 1e3:>10.3f}ms" for n in names)
        if "cython" in times:
            row += f"{times['python'] / times['cython']:>11.1f}x"
        print(row)
    if len(names) == 1:
        print("compiled backend unavailable; only the numpy fallback was timed")


if __name__ == "__main__":
    main()
