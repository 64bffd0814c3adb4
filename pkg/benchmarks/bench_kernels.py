"""Time the compiled t-distribution kernels against the pure-Python fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--n 20000]

Prints per-call timings for each backend and the speed-up, plus the
largest disagreement between the two on the benchmark inputs.
"""

import argparse
import timeit

import numpy as np

from cfwatermark import _fallback

try:
    from cfwatermark import _kernels
except ImportError:  # extension not built
    _kernels = None


def workloads(n, seed=0):
    rng = np.random.default_rng(seed)
    ts = rng.normal(0, 3, size=n).tolist()
    dfs = rng.integers(1, 128, size=n).astype(float).tolist()
    qs = rng.uniform(0.01, 0.99, size=max(1, n // 20)).tolist()
    return {
        "t_sf (scalar calls)": (lambda k: [k.t_sf(t, d) for t, d in zip(ts, dfs)], n),
        "t_sf_many (one call)": (lambda k: k.t_sf_many(ts, 63.0), n),
        "t_quantile": (lambda k: [k.t_quantile(q, 20.0) for q in qs], len(qs)),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--n", type=int, default=20000)
    args = ap.parse_args(argv)

    if _kernels is None:
        print("compiled kernels not available; build with `pip install -e . --no-build-isolation`")
        return 1
    print(f"{'workload':24s} {'python us/call':>15s} {'cython us/call':>15s} {'speed-up':>9s} {'max diff':>10s}")
    for name, (fn, calls) in workloads(args.n).items():
        py = min(timeit.repeat(lambda: fn(_fallback), number=1, repeat=args.repeat)) / calls * 1e6
        cy = min(timeit.repeat(lambda: fn(_kernels), number=1, repeat=args.repeat)) / calls * 1e6
        diff = float(np.max(np.abs(np.asarray(fn(_fallback)) - np.asarray(fn(_kernels)))))
        print(f"{name:24s} {py:15.2f} {cy:15.2f} {py / cy:8.1f}x {diff:10.1e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
