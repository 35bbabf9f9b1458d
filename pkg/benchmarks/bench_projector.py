"""Time the compiled ray tracer against the numpy fallback.

Usage::

    python3 benchmarks/bench_projector.py [--size 64] [--angles 20] [--repeat 3]

Prints best-of-``repeat`` seconds for forward and adjoint on each available
backend, plus the speed-up and the maximum relative disagreement.
"""

import argparse
import time

import numpy as np

from irnct import projector
from irnct.core import circular_geometry


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return min(times), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--angles", type=int, default=20)
    ap.add_argument("--detector", type=int, default=96)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    n = args.size
    dims, sp = (n, n, n), (256.0 / n,) * 3
    geom = circular_geometry(args.angles, 810.0, 1195.0, (args.detector, args.detector),
                             (6.0 * 96 / args.detector,) * 2)
    rng = np.random.default_rng(0)
    x = rng.random(n ** 3)
    y = rng.random(geom.n_rays)

    results = {}
    print(f"volume {n}^3, {args.angles} views, detector {args.detector}^2, "
          f"threads {projector.num_threads()}")
    for name in sorted(projector.KERNELS):
        tf, fwd = best_of(lambda: projector.forward_raw(x, geom, dims, sp, backend=name),
                          args.repeat)
        ta, adj = best_of(lambda: projector.adjoint_raw(y, geom, dims, sp, backend=name),
                          args.repeat)
        results[name] = (tf, ta, fwd, adj)
        print(f"{name:>9}: forward {tf:8.3f} s   adjoint {ta:8.3f} s")

    if "compiled" in results:
        cf, ca, cfw, cad = results["compiled"]
        pf, pa, pfw, pad = results["python"]
        print(f"speed-up: forward {pf / cf:6.1f}x   adjoint {pa / ca:6.1f}x")
        diff = max(np.abs(cfw - pfw).max() / np.abs(pfw).max(),
                   np.abs(cad - pad).max() / np.abs(pad).max())
        print(f"max relative disagreement: {diff:.2e}")
    else:
        print("compiled extension not built; only the fallback was timed")


if __name__ == "__main__":
    main()
