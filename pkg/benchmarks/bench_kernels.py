"""Benchmark the numba kernels against their pure-numpy fallbacks.

Run as ``python benchmarks/bench_kernels.py``.  The same comparison is
what the ``SOCIAL_ANCHORS_NO_NUMBA`` environment flag switches between
at import time; both implementations stay importable regardless of the
flag, so this script times them side by side in one process.
"""
from __future__ import annotations

import math
import time

import numpy as np

from social_anchors import kernels
from social_anchors.anchors import AnchorConfig, anchor_statics


def time_fn(fn, args, repeats: int = 200, warmup: int = 3) -> float:
    """Best-of-runs average seconds per call."""
    for _ in range(warmup):
        fn(*args)
    best = math.inf
    for _ in range(5):
        start = time.perf_counter()
        for _ in range(repeats):
            fn(*args)
        best = min(best, (time.perf_counter() - start) / repeats)
    return best


def feature_table_args(rng, n_neighbours: int):
    cfg = AnchorConfig()
    statics = anchor_statics(cfg)
    anchors = 0.4 * statics["unit"]
    pos = rng.uniform(-4, 4, (n_neighbours, 2))
    vel = rng.uniform(-0.5, 0.5, (n_neighbours, 2))
    return (
        pos, vel, anchors,
        statics["offsets"], statics["sector_lo_rel"], statics["sector_hi_rel"],
        statics["multipliers"],
        0.4, 4.0, 0.2, 1.0,
        math.radians(15), math.radians(25), 5.0, math.radians(25), 1.0,
    )


def pool_grid_args(rng, n_neighbours: int):
    return (
        rng.uniform(-5, 5, (n_neighbours, 2)),
        rng.uniform(-0.5, 0.5, (n_neighbours, 2)),
        16,
        0.6,
    )


def social_force_args(rng, n_agents: int):
    pos = rng.uniform(-4, 4, (n_agents, 2))
    return (
        pos, rng.uniform(-1, 1, (n_agents, 2)), -pos,
        np.full(n_agents, 1.0), 21, 0.4, 0.5, 2.0, 0.8, 0.3, 2.0, 4,
    )


def min_interp_args(rng):
    return (rng.uniform(-5, 5, (13, 2)), rng.uniform(-5, 5, (13, 2)), 4)


CASES = [
    ("feature_table (J=5)", kernels.feature_table_numba, kernels.feature_table_numpy,
     lambda rng: feature_table_args(rng, 5)),
    ("feature_table (J=50)", kernels.feature_table_numba, kernels.feature_table_numpy,
     lambda rng: feature_table_args(rng, 50)),
    ("pool_grid (J=5)", kernels.pool_grid_numba, kernels.pool_grid_numpy,
     lambda rng: pool_grid_args(rng, 5)),
    ("pool_grid (J=50)", kernels.pool_grid_numba, kernels.pool_grid_numpy,
     lambda rng: pool_grid_args(rng, 50)),
    ("social_force (N=6, T=21)", kernels.integrate_social_force_numba,
     kernels.integrate_social_force_numpy, lambda rng: social_force_args(rng, 6)),
    ("social_force (N=40, T=21)", kernels.integrate_social_force_numba,
     kernels.integrate_social_force_numpy, lambda rng: social_force_args(rng, 40)),
    ("min_interp_distance", kernels.min_interp_distance_numba,
     kernels.min_interp_distance_numpy, lambda rng: min_interp_args(rng)),
]


def main() -> None:
    rng = np.random.default_rng(0)
    print(f"numba available and active: {kernels.NUMBA_ENABLED}")
    if not kernels.NUMBA_ENABLED:
        print("(both columns run the numpy fallback; unset SOCIAL_ANCHORS_NO_NUMBA "
              "to benchmark the JIT path)")
    header = f"{'kernel':<28} {'numba':>12} {'numpy':>12} {'speedup':>9}"
    print(header)
    print("-" * len(header))
    for name, fn_nb, fn_np, make_args in CASES:
        args = make_args(rng)
        t_nb = time_fn(fn_nb, args)
        t_np = time_fn(fn_np, args)
        print(f"{name:<28} {t_nb * 1e6:>10.1f}us {t_np * 1e6:>10.1f}us {t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
