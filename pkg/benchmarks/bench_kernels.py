"""Compare the numba and numpy kernel backends on random points.

    python benchmarks/bench_kernels.py [--points 100000] [--repeat 20]

Checks that both backends agree, then prints the best-of-``repeat`` time per
call for each kernel. An end-to-end fit is timed in a subprocess per backend,
since the backend is fixed when the package is imported.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from sqems import kernels

KERNELS = ("log_norm", "radial_residual", "radial_jacobian", "log_norm_gradient")

FIT_SNIPPET = """
import time
from sqems import Superquadric, ems_fit, sample_surface_equidistant
cloud = sample_surface_equidistant(Superquadric(0.4, 1.3, 1.0, 1.5, 2.0), 0.05).points
ems_fit(cloud)  # warm-up and compilation
t = time.perf_counter(); ems_fit(cloud); print(time.perf_counter() - t)
"""


def _flatten(out):
    return np.concatenate([np.ravel(o) for o in out]) if isinstance(out, tuple) else out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=100_000)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    pts = rng.normal(size=(args.points, 3))
    shape = np.array([0.3, 1.4, 1.0, 1.5, 2.0])

    print(f"{args.points} points, best of {args.repeat}")
    if not kernels.NUMBA_AVAILABLE:
        print("numba unavailable; only the numpy backend can be timed")
    print(f"{'kernel':<20}{'numpy ms':>10}{'numba ms':>10}{'speed-up':>10}")
    for name in KERNELS:
        np_fn = getattr(kernels, f"{name}_numpy")
        t_np = min(timeit.repeat(lambda: np_fn(pts, shape), number=1, repeat=args.repeat))
        row = f"{name:<20}{1e3 * t_np:>10.2f}"
        if kernels.NUMBA_AVAILABLE:
            nb_fn = getattr(kernels, f"{name}_numba")
            diff = np.max(np.abs(_flatten(nb_fn(pts, shape)) - _flatten(np_fn(pts, shape))))
            if diff > 1e-9:
                raise SystemExit(f"{name}: backends disagree by {diff:.3g}")
            t_nb = min(timeit.repeat(lambda: nb_fn(pts, shape), number=1, repeat=args.repeat))
            row += f"{1e3 * t_nb:>10.2f}{t_np / t_nb:>10.1f}"
        print(row)

    print("end-to-end fit (s):")
    for label, flag in (("numba", "0"), ("numpy", "1")):
        env = dict(os.environ, SQEMS_DISABLE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", FIT_SNIPPET], env=env, capture_output=True, text=True, check=True)
        print(f"  {label:<6}{float(out.stdout):.3f}")


if __name__ == "__main__":
    main()
