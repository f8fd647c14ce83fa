"""Timing harness for the voxelizer stages.

Each measurement is the median of ``repeats`` runs on a monotonic clock after
one discarded warm-up run.
"""

import statistics
import time

import numpy as np

from .cloudio import PointCloud
from .fdv import assign_pillars, compute_grid, fdv_features
from .rvbackbone import default_specs, rv_backbone_forward

STAGES = ("voxelize", "features", "fdv", "backbone")
BENCH_RANGE = ((-51.2, 51.2), (-51.2, 51.2), (-5.0, 3.0))
BENCH_VOXEL = (0.32, 0.32)


def synthetic_points(n: int, cloud_range=BENCH_RANGE, seed: int = 0) -> PointCloud:
    rng = np.random.default_rng(seed)
    lo = [a for a, _ in cloud_range]
    hi = [b for _, b in cloud_range]
    # a 2% margin outside the range exercises the skip path
    span = np.subtract(hi, lo)
    xyz = rng.uniform(np.subtract(lo, 0.01 * span), np.add(hi, 0.01 * span), size=(n, 3))
    return PointCloud(xyz)


def median_time(fn, repeats: int = 5, warmup: int = 1) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def linear_fit(n, t):
    """Least-squares ``t = a*n + b``; returns (a, b, r_squared)."""
    n = np.asarray(n, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    a, b = np.polyfit(n, t, 1)
    resid = t - (a * n + b)
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return float(a), float(b), r2


def run_bench(sizes, repeats=5, stages=STAGES, seed=0, cloud_range=BENCH_RANGE, voxel=BENCH_VOXEL):
    """Rows of ``{stage, n, median_s, ns_per_point}``."""
    sizes = [int(s) for s in sizes]
    if sizes != sorted(sizes):
        raise ValueError("sizes must be ascending")
    unknown = set(stages) - set(STAGES)
    if unknown:
        raise ValueError(f"unknown stages {sorted(unknown)}")
    grid = compute_grid(cloud_range, voxel)
    specs = default_specs(seed)
    rows = []
    for n in sizes:
        cloud = synthetic_points(n, cloud_range, seed)
        assignment = assign_pillars(cloud, grid)
        feats = fdv_features(cloud, assignment, grid)
        jobs = {
            "voxelize": lambda: assign_pillars(cloud, grid),
            "features": lambda: fdv_features(cloud, assignment, grid),
            "fdv": lambda: fdv_features(cloud, assign_pillars(cloud, grid), grid),
            "backbone": lambda: rv_backbone_forward(feats, assignment, specs),
        }
        for st in stages:
            t = median_time(jobs[st], repeats)
            rows.append({"stage": st, "n": n, "median_s": t, "ns_per_point": 1e9 * t / n})
    return rows


def summarize(rows):
    """Per stage: linear-fit R^2 and time(4N)/time(N) for the first 4x size pair."""
    out = {}
    for st in dict.fromkeys(r["stage"] for r in rows):
        pts = sorted((r["n"], r["median_s"]) for r in rows if r["stage"] == st)
        n = [p[0] for p in pts]
        t = [p[1] for p in pts]
        info = {"sizes": n}
        if len(n) >= 2:
            info["slope_s_per_point"], info["intercept_s"], info["r2"] = linear_fit(n, t)
        by_n = dict(pts)
        for small in n:
            if 4 * small in by_n:
                info["ratio_4x"] = by_n[4 * small] / by_n[small]
                info["ratio_pair"] = [small, 4 * small]
                break
        out[st] = info
    return out
