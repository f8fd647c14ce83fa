"""Fast dynamic voxelizer.

Every in-range point is assigned to a pillar (or 3D voxel) with no per-voxel
point cap and no padding, then encoded with nine per-point channels:

    x, y, z                      raw coordinates
    x_c, y_c, z_c                offset from the pillar's geometric center
    x_m, y_m, z_m                offset from the mean of the pillar's points

Assignment is O(N + cells): a dense cell table records the first point that
lands in each cell, and pillar ordinals follow first-occurrence order.
"""

import math
from dataclasses import dataclass

import numpy as np

from .cloudio import PointCloud, as_range
from .errors import ConfigError, DataError
from .scatter import scatter_mean

__all__ = [
    "SKIP",
    "FEATURE_NAMES",
    "GridConfig",
    "PillarAssignment",
    "compute_grid",
    "assign_pillars",
    "fdv_features",
    "canonical_order",
    "pillar_table",
    "voxelize",
]

SKIP = -1
FEATURE_NAMES = ("x_pt", "y_pt", "z_pt", "x_center", "y_center", "z_center", "x_mean", "y_mean", "z_mean")
_GRID_TOL = 1e-6
# above this many cells the dense first-occurrence table is replaced by a sort
_DENSE_TABLE_LIMIT = 1 << 24


@dataclass(frozen=True)
class GridConfig:
    cloud_range: tuple  # ((xmin, xmax), (ymin, ymax), (zmin, zmax))
    voxel_size: tuple  # (vx, vy, vz)
    grid_size: tuple  # (nx, ny, nz)

    @property
    def pillar_mode(self) -> bool:
        return self.grid_size[2] == 1

    @property
    def lower(self) -> np.ndarray:
        return np.array([lo for lo, _ in self.cloud_range])

    @property
    def upper(self) -> np.ndarray:
        return np.array([hi for _, hi in self.cloud_range])

    @property
    def height(self) -> int:
        return self.grid_size[1]

    @property
    def width(self) -> int:
        return self.grid_size[0]

    def cell_of(self, x: float, y: float):
        """(row, col) of a BEV location, or None outside the range."""
        (x0, x1), (y0, y1), _ = self.cloud_range
        if not (x0 <= x < x1 and y0 <= y < y1):
            return None
        col = min(int(math.floor((x - x0) / self.voxel_size[0])), self.grid_size[0] - 1)
        row = min(int(math.floor((y - y0) / self.voxel_size[1])), self.grid_size[1] - 1)
        return row, col


def compute_grid(cloud_range, voxel_size) -> GridConfig:
    """Build a grid; ``voxel_size`` of length 2 means pillar mode (one z layer).

    Each axis extent must be an integer multiple of its voxel size (within
    1e-6); otherwise the config is rejected.
    """
    rng = as_range(cloud_range)
    vs = [float(v) for v in voxel_size]
    if len(vs) == 2:
        vs.append(rng[2][1] - rng[2][0])
    if len(vs) != 3:
        raise ConfigError(f"voxel_size must have 2 or 3 entries, got {len(vs)}")
    sizes = []
    for axis, (lo, hi), v in zip("xyz", rng, vs):
        if not (v > 0 and math.isfinite(v)):
            raise ConfigError(f"voxel size on axis {axis} must be positive, got {v}")
        ratio = (hi - lo) / v
        n = round(ratio)
        if abs(ratio - n) > _GRID_TOL:
            raise ConfigError(f"axis {axis}: extent {hi - lo} is not a multiple of voxel size {v} ({ratio:.6g} cells)")
        if n < 1:
            raise ConfigError(f"axis {axis}: grid size must be >= 1")
        sizes.append(int(n))
    return GridConfig(rng, tuple(vs), tuple(sizes))


@dataclass(frozen=True, eq=False)
class PillarAssignment:
    pillar_of_point: np.ndarray  # (N,) ordinal or SKIP
    pillar_coords: np.ndarray  # (P, 3) int64: row, col, layer
    batch_of_pillar: np.ndarray  # (P,)
    counts: np.ndarray  # (P,) points per pillar

    @property
    def pillar_count(self) -> int:
        return self.pillar_coords.shape[0]

    @property
    def point_index(self) -> np.ndarray:
        """Indices of non-skipped points, in input order (feature row order)."""
        return np.flatnonzero(self.pillar_of_point != SKIP)

    @property
    def point_pillar(self) -> np.ndarray:
        """Pillar ordinal of each feature row."""
        p = self.pillar_of_point
        return p[p != SKIP]

    @property
    def n_kept(self) -> int:
        return int(np.count_nonzero(self.pillar_of_point != SKIP))


def _cell_indices(xyz, grid):
    lower, upper = grid.lower, grid.upper
    inside = ((xyz >= lower) & (xyz < upper)).all(axis=1)
    cells = np.floor((xyz[inside] - lower) / np.array(grid.voxel_size)).astype(np.int64)
    # a coordinate just below max can round up to grid_size
    np.minimum(cells, np.array(grid.grid_size) - 1, out=cells)
    np.maximum(cells, 0, out=cells)
    return inside, cells


def assign_pillars(cloud: PointCloud, grid: GridConfig) -> PillarAssignment:
    n = len(cloud)
    nx, ny, nz = grid.grid_size
    inside, cells = _cell_indices(cloud.xyz, grid)
    batch = cloud.batch[inside]
    n_batches = int(batch.max()) + 1 if batch.size else 0
    # canonical key order: batch, row, col, layer
    key = ((batch * ny + cells[:, 1]) * nx + cells[:, 0]) * nz + cells[:, 2]
    m = key.shape[0]
    n_cells = n_batches * nx * ny * nz

    if n_cells <= _DENSE_TABLE_LIMIT:
        first = np.full(n_cells, m, dtype=np.int64)
        np.minimum.at(first, key, np.arange(m, dtype=np.int64))
        is_first = np.zeros(m, dtype=bool)
        is_first[first[first < m]] = True
        ordinal_of_first = np.cumsum(is_first) - 1
        cell_ordinal = np.empty(n_cells, dtype=np.int64)
        firsts = np.flatnonzero(is_first)
        cell_ordinal[key[firsts]] = ordinal_of_first[firsts]
        local = cell_ordinal[key]
    else:
        uniq, first_idx, inverse = np.unique(key, return_index=True, return_inverse=True)
        rank = np.empty(uniq.shape[0], dtype=np.int64)
        order = np.argsort(first_idx, kind="stable")
        rank[order] = np.arange(uniq.shape[0])
        firsts = first_idx[order]
        local = rank[inverse.reshape(-1)]

    pillar_keys = key[firsts]
    layer = pillar_keys % nz
    col = (pillar_keys // nz) % nx
    row = (pillar_keys // (nz * nx)) % ny
    pb = pillar_keys // (nz * nx * ny)
    counts = np.bincount(local, minlength=firsts.shape[0]).astype(np.int64)

    pillar_of_point = np.full(n, SKIP, dtype=np.int64)
    pillar_of_point[inside] = local
    coords = np.column_stack([row, col, layer]).astype(np.int64)
    return PillarAssignment(pillar_of_point, coords, pb.astype(np.int64), counts)


def fdv_features(cloud: PointCloud, assignment: PillarAssignment, grid: GridConfig) -> np.ndarray:
    """Nine-channel encoding, one row per non-skipped point in input order."""
    if assignment.pillar_of_point.shape[0] != len(cloud):
        raise DataError("assignment was built for a different cloud (point count mismatch)")
    idx = assignment.point_index
    pp = assignment.point_pillar
    xyz = cloud.xyz[idx]
    p_count = assignment.pillar_count
    if p_count and (pp.max() >= p_count):
        raise DataError("assignment references pillars beyond pillar_count")
    coords = assignment.pillar_coords
    vs = np.array(grid.voxel_size)
    # coords columns are (row, col, layer) = (y, x, z) cell indices
    cell_xyz = coords[:, [1, 0, 2]].astype(np.float64)
    centers = grid.lower + (cell_xyz + 0.5) * vs
    mean = scatter_mean(xyz, pp, p_count)
    if not np.array_equal(mean.counts, assignment.counts):
        raise DataError("assignment counts disagree with its point mapping")
    return np.hstack([xyz, xyz - centers[pp], xyz - mean.values[pp]])


def canonical_order(assignment: PillarAssignment) -> np.ndarray:
    """Permutation of pillar ordinals sorting by (batch, row, col, layer)."""
    c = assignment.pillar_coords
    return np.lexsort((c[:, 2], c[:, 1], c[:, 0], assignment.batch_of_pillar))


def pillar_table(cloud: PointCloud, assignment: PillarAssignment) -> np.ndarray:
    """Rows ``batch, row, col, layer, count, mean_x, mean_y, mean_z`` in canonical order."""
    xyz = cloud.xyz[assignment.point_index]
    mean = scatter_mean(xyz, assignment.point_pillar, assignment.pillar_count).values
    order = canonical_order(assignment)
    c = assignment.pillar_coords[order]
    return np.column_stack([
        assignment.batch_of_pillar[order], c[:, 0], c[:, 1], c[:, 2],
        assignment.counts[order], mean[order],
    ])


def voxelize(cloud: PointCloud, grid: GridConfig):
    """Assignment plus features in one call."""
    a = assign_pillars(cloud, grid)
    return a, fdv_features(cloud, a, grid)
