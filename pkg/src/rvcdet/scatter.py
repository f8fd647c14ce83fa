"""Segment reductions over index-addressed buckets.

Every reduction accumulates a bucket's rows in ascending source-row order, so
results are bit-reproducible.  Work is split across channels only (never
across rows), which keeps that order intact for any ``RVC_THREADS`` value.
Empty buckets hold 0.
"""

from dataclasses import dataclass

import numpy as np

from ._parallel import ordered_map
from .errors import ScatterIndexError, ShapeError

__all__ = ["SegmentResult", "scatter_sum", "scatter_mean", "scatter_max", "check_index"]


@dataclass(frozen=True)
class SegmentResult:
    values: np.ndarray  # (dim_size, channels)
    counts: np.ndarray  # (dim_size,) int64
    argmax: np.ndarray | None = None  # (dim_size, channels), -1 for empty buckets

    @property
    def dim_size(self) -> int:
        return self.values.shape[0]


def _as_rows(src) -> np.ndarray:
    src = np.asarray(src, dtype=np.float64)
    if src.ndim == 1:
        src = src[:, None]
    if src.ndim != 2:
        raise ShapeError(f"src must be rows x channels, got shape {src.shape}")
    return src


def check_index(idx, n_rows: int, dim_size: int) -> np.ndarray:
    """Validate ``idx`` against the source row count and bucket count."""
    idx = np.asarray(idx)
    if idx.ndim != 1 or idx.shape[0] != n_rows:
        raise ShapeError(f"index has shape {idx.shape}, expected ({n_rows},)")
    if n_rows and not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError(f"index must be integer, got {idx.dtype}")
    idx = idx.astype(np.int64, copy=False)
    if dim_size < 0:
        raise ShapeError("dim_size must be non-negative")
    if n_rows:
        bad = np.flatnonzero((idx < 0) | (idx >= dim_size))
        if bad.size:
            row = int(bad[0])
            raise ScatterIndexError(row, int(idx[row]), dim_size)
    return idx


def _sum_columns(src: np.ndarray, idx: np.ndarray, dim_size: int) -> np.ndarray:
    # bincount adds weights strictly in input order.
    def column(c):
        # with zero rows bincount returns an integer array
        return np.bincount(idx, weights=src[:, c], minlength=dim_size).astype(np.float64, copy=False)

    cols = ordered_map(column, range(src.shape[1]))
    if not cols:
        return np.zeros((dim_size, 0))
    return np.stack(cols, axis=1)


def scatter_sum(src, idx, dim_size: int) -> SegmentResult:
    src = _as_rows(src)
    idx = check_index(idx, src.shape[0], dim_size)
    counts = np.bincount(idx, minlength=dim_size).astype(np.int64)
    return SegmentResult(_sum_columns(src, idx, dim_size), counts)


def scatter_mean(src, idx, dim_size: int) -> SegmentResult:
    """Per-bucket mean: ``values[i] = sum(src[j] for idx[j] == i) / N_i``."""
    summed = scatter_sum(src, idx, dim_size)
    values = summed.values
    nonempty = summed.counts > 0
    values[nonempty] /= summed.counts[nonempty, None]
    return SegmentResult(values, summed.counts)


def scatter_max(src, idx, dim_size: int) -> SegmentResult:
    """Per-bucket, per-channel maximum with the arg-max source row.

    Ties resolve to the smallest source row.  Empty buckets get value 0 and
    arg-max -1.
    """
    src = _as_rows(src)
    idx = check_index(idx, src.shape[0], dim_size)
    n = src.shape[0]
    counts = np.bincount(idx, minlength=dim_size).astype(np.int64)
    rows = np.arange(n, dtype=np.int64)
    empty = counts == 0

    def column(c):
        col = np.ascontiguousarray(src[:, c])
        best = np.full(dim_size, -np.inf)
        np.maximum.at(best, idx, col)
        hit = col == best[idx]
        arg = np.full(dim_size, n, dtype=np.int64)
        np.minimum.at(arg, idx[hit], rows[hit])
        best[empty] = 0.0
        arg[empty] = -1
        return best, arg

    cols = ordered_map(column, range(src.shape[1]))
    if cols:
        values = np.stack([v for v, _ in cols], axis=1)
        argmax = np.stack([a for _, a in cols], axis=1)
    else:
        values = np.zeros((dim_size, 0))
        argmax = np.zeros((dim_size, 0), dtype=np.int64)
    return SegmentResult(values, counts, argmax)
