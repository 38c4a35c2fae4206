"""Compiled vs pure-numpy kernels.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Prints median wall time per call for each kernel and backend, plus the
maximum absolute difference between the two backends' outputs.
"""

import argparse
import timeit

import numpy as np

from tdsampler import kernels
from tdsampler.score_model import three_component_gmm


def cases(K, rng):
    tgt = three_component_gmm()
    w = rng.random(K)
    w /= w.sum()
    lw = rng.normal(size=K) * 5
    x = rng.normal(size=(K, 2)) * 2
    return {
        "systematic_ancestors": lambda b: b.systematic_ancestors(w, 0.37),
        "log_normalize": lambda b: b.log_normalize(lw),
        "ess_from_log_weights": lambda b: b.ess_from_log_weights(lw),
        "gmm_posterior": lambda b: b.gmm_posterior(x, tgt.means, np.log(tgt.weights),
                                                   tgt.iso_var, 0.6, 0.64),
    }


def max_diff(a, b):
    if isinstance(a, tuple):
        return max(max_diff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a, float) - np.asarray(b, float))))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=7)
    ap.add_argument("--K", type=int, nargs="+", default=[256, 4096, 65536])
    args = ap.parse_args()
    if kernels.compiled_backend is None:
        print("compiled backend not built; only the numpy fallback is available")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22}{'K':>7}{'compiled_us':>14}{'python_us':>12}{'speedup':>9}{'max_diff':>11}")
    for K in args.K:
        for name, fn in cases(K, rng).items():
            t = {}
            for label, b in (("c", kernels.compiled_backend), ("py", kernels.python_backend)):
                n = max(1, 20000 // K)
                t[label] = np.median(timeit.repeat(lambda: fn(b), number=n, repeat=args.repeat)) / n
            diff = max_diff(fn(kernels.compiled_backend), fn(kernels.python_backend))
            print(f"{name:<22}{K:>7}{t['c'] * 1e6:>14.1f}{t['py'] * 1e6:>12.1f}"
                  f"{t['py'] / t['c']:>9.2f}{diff:>11.2e}")


if __name__ == "__main__":
    main()
