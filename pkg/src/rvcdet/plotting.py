"""Report figures, written to files next to the CSV outputs."""

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .cloudio import CLASS_NAMES  # noqa: E402
from .geometry import bev_corners  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def figsize(width=6.0, ratio=None):
    ratio = ratio or (math.sqrt(5) - 1) / 2
    return (width, width * ratio)


def _save(fig, path):
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_ablation_grid(rows, path):
    """Validation accuracy per (architecture, window size); rows are dicts with kind, k, val_accuracy."""
    kinds = list(dict.fromkeys(r["kind"] for r in rows))
    ks = sorted({int(r["k"]) for r in rows})
    grid = np.full((len(kinds), len(ks)), np.nan)
    for r in rows:
        if r.get("val_accuracy") not in (None, "", "-"):
            grid[kinds.index(r["kind"]), ks.index(int(r["k"]))] = 100.0 * float(r["val_accuracy"])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(1.2 * len(ks) + 2.5, 0.5 + 0.12 * len(kinds)))
        im = ax.imshow(np.ma.masked_invalid(grid), cmap="viridis", aspect="auto")
        ax.set_xticks(range(len(ks)), [f"{k}x{k}" for k in ks])
        ax.set_yticks(range(len(kinds)), kinds)
        for i in range(len(kinds)):
            for j in range(len(ks)):
                txt = "-" if np.isnan(grid[i, j]) else f"{grid[i, j]:.2f}"
                ax.text(j, i, txt, ha="center", va="center", color="w", fontsize=8)
        ax.set_xlabel("input window")
        ax.set_title("Validation accuracy (%)")
        fig.colorbar(im, ax=ax, shrink=0.8)
        return _save(fig, path)


def plot_training_curves(histories, path):
    """``histories``: mapping label -> list of (epoch, val_accuracy)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize())
        for label, pts in histories.items():
            e, a = zip(*pts) if pts else ((), ())
            ax.plot(e, [100 * x for x in a], marker=".", label=label)
        ax.set_xlabel("epoch")
        ax.set_ylabel("validation accuracy (%)")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_precision(rows, path):
    """Grouped bars: one group per pipeline, one bar per class plus overall."""
    cols = ["Overall", *CLASS_NAMES]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(7.0))
        width = 0.8 / len(cols)
        x = np.arange(len(rows))
        for i, col in enumerate(cols):
            vals = [np.nan if r[col] is None else 100 * r[col] for r in rows]
            ax.bar(x + (i - (len(cols) - 1) / 2) * width, vals, width, label=col)
        ax.set_xticks(x, [r["pipeline"] for r in rows], rotation=20, ha="right")
        ax.set_ylabel("precision (%)")
        ax.set_ylim(0, 100)
        ax.legend(frameon=False, ncol=len(cols))
        return _save(fig, path)


def plot_bench(rows, path):
    """Median stage time against point count, with a least-squares line per stage."""
    stages = list(dict.fromkeys(r["stage"] for r in rows))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize())
        for st in stages:
            pts = sorted((int(r["n"]), float(r["median_s"])) for r in rows if r["stage"] == st)
            n, t = map(np.array, zip(*pts))
            ax.plot(n, 1e3 * t, "o", label=st)
            if len(n) > 1:
                slope, icpt = np.polyfit(n, t, 1)
                ax.plot(n, 1e3 * (slope * n + icpt), "-", alpha=0.6, color=ax.lines[-1].get_color())
        ax.set_xlabel("points")
        ax.set_ylabel("median time (ms)")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_scene(scene, dets, path, heatmap=None, grid=None):
    """Top view of a scene: points, ground truth (red), detections (black)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 6))
        if heatmap is not None and grid is not None:
            (x0, x1), (y0, y1), _ = grid.cloud_range
            ax.imshow(heatmap.data.max(axis=0), origin="lower", extent=(x0, x1, y0, y1), cmap="magma", alpha=0.8)
        xyz = scene.cloud.xyz
        ax.scatter(xyz[:, 0], xyz[:, 1], s=0.3, c="0.5", linewidths=0)
        for boxes, color in ((scene.gt, "tab:red"), ([d.box for d in dets], "k")):
            for b in boxes:
                c = bev_corners(b.cx, b.cy, b.l, b.w, b.yaw)
                c = np.vstack([c, c[:1]])
                ax.plot(c[:, 0], c[:, 1], color=color, lw=0.8)
        ax.set_aspect("equal")
        ax.set_xlabel("x (m)")
        ax.set_ylabel("y (m)")
        return _save(fig, path)
