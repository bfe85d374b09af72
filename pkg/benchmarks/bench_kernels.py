"""Compare the numba and pure-numpy kernel backends.

Times the per-voxel log-linear fit, the log-domain mix and the in-plane
bilinear resize on a clinical-sized DWI grid, and checks that both backends
agree. The numba timings exclude JIT compilation (one warm-up call each).

Usage::

    python benchmarks/bench_kernels.py [--grid 256 256 60] [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from cdisrad._accel import HAVE_NUMBA
from cdisrad.kernels import log_mix, loglinear_fit, resize_inplane

BVALUES = np.array([0.0, 100.0, 600.0, 800.0])
MIX_B = np.array([0.0, 100.0, 600.0, 800.0, 1000.0, 1500.0, 2000.0])


def make_inputs(grid, seed=0):
    rng = np.random.default_rng(seed)
    n = int(np.prod(grid))
    s0 = rng.uniform(200, 1500, n)
    adc = rng.uniform(5e-4, 3e-3, n)
    dwi = np.maximum(s0 * np.exp(-np.outer(BVALUES, adc)) + rng.normal(0, 20, (4, n)), 0)
    mix = s0 * np.exp(-np.outer(MIX_B, adc))
    weights = np.full(len(MIX_B), 1.0 / len(MIX_B))
    volume = rng.normal(size=grid)
    return dwi, mix, weights, volume


def cases(dwi, mix, weights, volume):
    return {
        "loglinear_fit": lambda backend: loglinear_fit(BVALUES, dwi, 1e-3, backend=backend),
        "log_mix": lambda backend: log_mix(mix, weights, 1e-3, backend=backend),
        "resize_inplane": lambda backend: resize_inplane(volume, 224, 224, backend=backend),
    }


def _flatten(out):
    return out if isinstance(out, np.ndarray) else np.concatenate([np.ravel(o) for o in out])


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--grid", type=int, nargs=3, default=(256, 256, 60), metavar=("NX", "NY", "NZ"))
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)

    backends = ["numpy"] + (["numba"] if HAVE_NUMBA else [])
    if not HAVE_NUMBA:
        print("numba unavailable or disabled; timing the numpy backend only")
    grid = tuple(args.grid)
    print(f"grid {grid} ({np.prod(grid):,} voxels), best of {args.repeat}")
    header = f"{'kernel':<16}" + "".join(f"{b + ' (s)':>14}" for b in backends)
    print(header + (f"{'speedup':>10}{'max |diff|':>13}" if HAVE_NUMBA else ""))
    for name, fn in cases(*make_inputs(grid)).items():
        results, times = {}, {}
        for backend in backends:
            results[backend] = _flatten(fn(backend))  # warm-up (JIT compile)
            times[backend] = min(timeit.repeat(lambda: fn(backend), number=1, repeat=args.repeat))
        row = f"{name:<16}" + "".join(f"{times[b]:>14.4f}" for b in backends)
        if HAVE_NUMBA:
            diff = np.max(np.abs(results["numba"] - results["numpy"]))
            row += f"{times['numpy'] / times['numba']:>9.2f}x{diff:>13.2e}"
        print(row)


if __name__ == "__main__":
    main()
