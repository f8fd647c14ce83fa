"""Structural pillar backbone: two PFN stages joined by scatter-max.

Stage 1 encodes each point's nine features, max-pools per pillar, and the
pooled vector is broadcast back to the pillar's points and concatenated with
the per-point encoding.  Stage 2 runs on that concatenation; its per-pillar
max is the backbone output, which ``scatter_to_bev`` lays out as a dense
bird's-eye-view pseudo-image.  Weights are seeded, not trained.
"""

from dataclasses import dataclass

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import DataError, FormatError, ShapeError
from .fdv import GridConfig, PillarAssignment
from .scatter import scatter_max
from .tinynn import linear_forward, relu, uniform_init

__all__ = [
    "PfnLayerSpec",
    "FeatureMap",
    "init_pfn_layer",
    "default_specs",
    "pfn_stage",
    "rv_backbone_forward",
    "scatter_to_bev",
    "save_backbone",
    "load_backbone",
]

DEFAULT_PLAN = (9, 32, 64)


@dataclass(frozen=True, eq=False)
class PfnLayerSpec:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise ShapeError(f"PFN weights {w.shape} and bias {b.shape} disagree")
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise DataError("PFN parameters must be finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True, eq=False)
class FeatureMap:
    data: np.ndarray  # (C, H, W)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


def init_pfn_layer(rng, in_channels: int, out_channels: int) -> PfnLayerSpec:
    return PfnLayerSpec(
        uniform_init(rng, (out_channels, in_channels), in_channels),
        uniform_init(rng, (out_channels,), in_channels),
    )


def default_specs(seed: int = 0, plan=DEFAULT_PLAN):
    """Two stages: ``plan[0] -> plan[1]`` then ``2*plan[1] -> plan[2]``."""
    rng = np.random.default_rng(seed)
    c_in, c_mid, c_out = plan
    return [init_pfn_layer(rng, c_in, c_mid), init_pfn_layer(rng, 2 * c_mid, c_out)]


def pfn_stage(features, assignment: PillarAssignment, spec: PfnLayerSpec):
    """Per-point ``ReLU(W f + b)`` and its per-pillar max."""
    features = np.asarray(features, dtype=np.float64)
    pp = assignment.point_pillar
    if features.ndim != 2 or features.shape[0] != pp.shape[0]:
        raise ShapeError(f"{features.shape[0] if features.ndim else 0} feature rows for {pp.shape[0]} assigned points")
    if features.shape[1] != spec.in_channels:
        raise ShapeError(f"PFN expects {spec.in_channels} channels, got {features.shape[1]}")
    h = relu(linear_forward(features, spec.weights, spec.bias))
    m = scatter_max(h, pp, assignment.pillar_count).values
    return h, m


def rv_backbone_forward(fdv, assignment: PillarAssignment, specs) -> np.ndarray:
    """Per-pillar output features, shape (pillar_count, specs[1].out_channels)."""
    s1, s2 = specs
    if s1.in_channels != 9:
        raise ShapeError(f"first stage must take the 9 voxelizer channels, not {s1.in_channels}")
    if s2.in_channels != 2 * s1.out_channels:
        raise ShapeError(f"second stage must take {2 * s1.out_channels} channels, not {s2.in_channels}")
    h1, m1 = pfn_stage(fdv, assignment, s1)
    joined = np.hstack([h1, m1[assignment.point_pillar]])
    _, m2 = pfn_stage(joined, assignment, s2)
    return m2


def scatter_to_bev(pillar_features, assignment: PillarAssignment, grid: GridConfig, n_batches=None):
    """One (C * nz, ny, nx) map per batch id; empty cells stay 0."""
    pf = np.asarray(pillar_features, dtype=np.float64)
    if pf.ndim != 2 or pf.shape[0] != assignment.pillar_count:
        raise ShapeError(f"pillar features {pf.shape} vs {assignment.pillar_count} pillars")
    nx, ny, nz = grid.grid_size
    if n_batches is None:
        n_batches = int(assignment.batch_of_pillar.max()) + 1 if assignment.pillar_count else 1
    c = pf.shape[1]
    out = np.zeros((n_batches, nz, c, ny, nx))
    rows, cols, layers = assignment.pillar_coords.T
    assert (rows < ny).all() and (cols < nx).all() and (layers < nz).all(), "pillar outside grid"
    out[assignment.batch_of_pillar, layers, :, rows, cols] = pf
    return [FeatureMap(out[b].reshape(nz * c, ny, nx)) for b in range(n_batches)]


def save_backbone(path, specs, seed=None) -> None:
    tensors = []
    for s in specs:
        tensors.extend([s.weights, s.bias])
    save_checkpoint(path, tensors, {"kind": "rv-backbone", "seed": seed})


def load_backbone(path):
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "rv-backbone" or len(tensors) % 2:
        raise FormatError(f"{path}: not a backbone checkpoint")
    return [PfnLayerSpec(tensors[i], tensors[i + 1]) for i in range(0, len(tensors), 2)]
