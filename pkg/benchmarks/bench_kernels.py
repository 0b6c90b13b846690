"""Benchmark the numba kernels against their pure-numpy fallbacks.

Each hot kernel in segsurv.kernels carries two implementations selected
at call time. This script times both on identical inputs and prints a
table with the speedup. Run with::

    python3 benchmarks/bench_kernels.py [--repeats 5]

The numba path needs numba importable and SEGSURV_NUMBA unset or "1";
otherwise only the numpy column is reported.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from segsurv import _accel, kernels
from segsurv.crf import CrfParams, _neighborhood_offsets


def _time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_resample(backend, repeats):
    rng = np.random.default_rng(0)
    src = rng.normal(size=(64, 64, 64))
    args = (src, (2.0, 2.0, 2.0), (96, 96, 96), (4.0 / 3, 4.0 / 3, 4.0 / 3))
    return _time(lambda: kernels.resample_trilinear_grid(*args, backend=backend),
                 repeats)


def bench_distances(backend, repeats):
    rng = np.random.default_rng(1)
    a = rng.normal(size=(2000, 3)) * 50
    b = rng.normal(size=(2500, 3)) * 50
    return _time(lambda: kernels.directed_min_sqdist(a, b, backend=backend),
                 repeats)


def bench_meanfield(backend, repeats):
    rng = np.random.default_rng(2)
    dims = (24, 24, 24)
    spacing = (2.0, 2.0, 2.0)
    prob = np.clip(rng.uniform(0.0, 1.0, size=dims), 1e-7, 1 - 1e-7)
    ct = rng.normal(size=dims)
    pet = rng.normal(size=dims)
    params = CrfParams(neighborhood_radius=3)
    u_fg, u_bg = -np.log(prob), -np.log(1.0 - prob)
    offsets, app_off, smooth_off = _neighborhood_offsets(
        params.neighborhood_radius, dims, spacing, params)
    q = np.full(dims, 0.5)
    inv = 1.0 / (2.0 * params.theta_beta ** 2)

    def run():
        kernels.meanfield_sweep(q, u_fg, u_bg, ct, pet, offsets, app_off,
                                smooth_off, inv, backend=backend)

    return _time(run, repeats)


def bench_glcm(backend, repeats):
    rng = np.random.default_rng(3)
    coords = np.argwhere(rng.uniform(size=(32, 32, 32)) < 0.4)
    levels = rng.integers(1, 33, size=len(coords))
    grid = np.zeros((32, 32, 32), dtype=np.int64)
    grid[tuple(coords.T)] = levels
    from segsurv.radiomics import DIRECTIONS_3D
    offsets = np.array(DIRECTIONS_3D, dtype=np.int64)
    return _time(lambda: kernels.glcm_accumulate(grid, offsets, 32,
                                                 backend=backend), repeats)


BENCHES = [
    ("resample_trilinear_grid", bench_resample),
    ("directed_min_sqdist", bench_distances),
    ("meanfield_sweep", bench_meanfield),
    ("glcm_accumulate", bench_glcm),
]


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    have_numba = _accel.NUMBA_AVAILABLE and _accel.USE_NUMBA
    print(f"numba path available: {have_numba}")
    header = f"{'kernel':<28}{'numpy (s)':>12}"
    if have_numba:
        header += f"{'numba (s)':>12}{'speedup':>10}"
    print(header)
    print("-" * len(header))
    for name, bench in BENCHES:
        t_np = bench("numpy", args.repeats)
        line = f"{name:<28}{t_np:>12.5f}"
        if have_numba:
            bench("numba", 1)  # compile outside the timed region
            t_nb = bench("numba", args.repeats)
            line += f"{t_nb:>12.5f}{t_np / t_nb:>10.2f}x"
        print(line)


if __name__ == "__main__":
    main()
