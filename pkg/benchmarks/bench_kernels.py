#!/usr/bin/env python3
"""Benchmark the compiled kernels against the pure-numpy fallback.

Times the three hot paths of a fit: block objective evaluation, one bounded
simplex block solve, and a full BCA fit on the 12-subject fixture.

Usage: python benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import importlib
import os
import subprocess
import sys
import time

import numpy as np

import gppanel._kernels_py as kpy
from gppanel.gpd import GpParams, gp_quantile

try:
    import gppanel._gpkern as kext
except ImportError:
    kext = None


def block_case(n=600, seed=0):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.normal(0.5, np.sqrt(2), n)])
    gamma = np.array([-0.5, 0.3])
    xi = np.full(n, 0.1)
    sigma = np.exp(X @ gamma)
    z = np.array([gp_quantile(u, GpParams(s, 0.1))
                  for u, s in zip(rng.uniform(0, 0.999, n), sigma)])
    return X, z, xi, gamma


def time_call(fn, repeat, inner=1):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        best = min(best, (time.perf_counter() - t0) / inner)
    return best


def bench_backend(mod, name, repeat):
    X, z, xi, gamma = block_case()
    lo, hi = np.full(2, -50.0), np.full(2, 50.0)
    t_obj = time_call(lambda: mod.scale_nll(gamma, X, z, xi), repeat, inner=200)
    t_fit = time_call(lambda: mod.fit_scale(np.zeros(2), X, z, xi, lo, hi), repeat)
    print(f"{name:>9}: scale_nll {t_obj * 1e6:8.1f} us   "
          f"block solve {t_fit * 1e3:8.2f} ms")
    return t_obj, t_fit


def bench_full_fit(repeat):
    """Full BCA fit under each backend, in subprocesses so the import-time
    backend selection applies."""
    script = (
        "import time, numpy as np\n"
        "from gppanel import kernels\n"
        "from gppanel.estimate import bca_fit\n"
        "from gppanel.simgen import SimConfig, gen_covariates, gen_excess_panel\n"
        "cfg = SimConfig(n_times=2000, seed=0)\n"
        "rng = np.random.default_rng(0)\n"
        "panel = gen_excess_panel(cfg, gen_covariates(cfg, rng), rng)\n"
        "t0 = time.perf_counter()\n"
        "fit = bca_fit(panel, cfg.truth_assignment, rng=rng)\n"
        "print(f'{kernels.BACKEND} bca_fit: {time.perf_counter()-t0:.3f} s "
        "(ll={fit.comp_loglik:.4f})')\n"
    )
    for env_extra in ({}, {"GPPANEL_NO_EXT": "1"}):
        env = dict(os.environ, **env_extra)
        subprocess.run([sys.executable, "-c", script], env=env, check=True)


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()

    results = {}
    results["python"] = bench_backend(kpy, "python", args.repeat)
    if kext is not None:
        results["compiled"] = bench_backend(kext, "compiled", args.repeat)
        speed_obj = results["python"][0] / results["compiled"][0]
        speed_fit = results["python"][1] / results["compiled"][1]
        print(f"  speedup: objective x{speed_obj:.1f}, block solve x{speed_fit:.1f}")
    else:
        print("compiled extension not available; fallback only")
    print()
    bench_full_fit(args.repeat)


if __name__ == "__main__":
    main()
