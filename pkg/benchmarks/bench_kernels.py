"""Time the pairwise-distance kernels: compiled extension vs NumPy fallback.

    python3 benchmarks/bench_kernels.py [--sizes 500 1000 2000 4000] [--dim 2]

Prints one row per size with the best-of-3 wall time of a full energy
distance for each backend and the agreement between them.
"""

import argparse
import time

import numpy as np

from modal_diffusion import kernels
from modal_diffusion.metrics import energy_distance


def best_of(fn, repeat=3):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[500, 1000, 2000, 4000])
    ap.add_argument("--dim", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    backends = ["python"]
    try:
        from modal_diffusion import _ckernels  # noqa: F401
        backends.insert(0, "cython")
    except ImportError:
        print("compiled extension not built; timing the fallback only")
    print(f"default backend: {kernels.BACKEND}")
    print(f"{'n':>6} " + " ".join(f"{b + ' [s]':>12}" for b in backends)
          + f" {'speedup':>8} {'max |diff|':>11}")
    for n in args.sizes:
        a = rng.standard_normal((n, args.dim))
        b = rng.standard_normal((n, args.dim)) + 0.5
        times, vals = [], []
        for be in backends:
            t, v = best_of(lambda: energy_distance(a, b, backend=be))
            times.append(t)
            vals.append(v)
        speed = times[-1] / times[0] if len(times) > 1 else float("nan")
        diff = max(abs(v - vals[0]) for v in vals)
        print(f"{n:>6} " + " ".join(f"{t:>12.4f}" for t in times)
              + f" {speed:>8.2f} {diff:>11.2e}")


if __name__ == "__main__":
    main()
