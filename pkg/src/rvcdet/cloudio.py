"""Point-cloud data model, file ingestion, range filtering and synthetic scenes.

Synthetic scenes stand in for real driving logs: boxes are dropped on a flat
ground plane, each box is sampled on its visible faces, and a detector is
simulated by jittering ground-truth boxes and injecting false positives.
"""

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, DataError, FormatError, GenerationError
from .geometry import bev_iou, wrap_yaw

__all__ = [
    "CLASS_NAMES",
    "Point",
    "PointCloud",
    "GtBox",
    "Detection",
    "SyntheticScene",
    "SceneConfig",
    "ScoreModel",
    "DetectionSimConfig",
    "as_range",
    "derive_seed",
    "load_kitti_bin",
    "kitti_bytes",
    "save_kitti_bin",
    "load_csv",
    "load_cloud",
    "filter_range",
    "synth_scene",
    "synth_detections",
    "write_scene",
    "read_scene",
    "write_detections",
    "read_detections",
]

CLASS_NAMES = ("Vehicle", "Pedestrian", "Cyclist")
DEFAULT_RANGE = ((-40.0, 40.0), (-40.0, 40.0), (-3.0, 3.0))

# (length, width, height) uniform bounds per class, meters
SIZE_PRIORS = {
    0: ((3.8, 5.0), (1.7, 2.1), (1.4, 1.8)),
    1: ((0.6, 1.0), (0.6, 1.0), (1.6, 1.9)),
    2: ((1.6, 1.9), (0.5, 0.8), (1.5, 1.8)),
}

PLACEMENT_ATTEMPTS = 1000
SCENE_MAGIC = "rvc-scene v1"
DETS_MAGIC = "rvc-dets v1"


class Point(NamedTuple):
    x: float
    y: float
    z: float
    intensity: float = 0.0


def _readonly(a):
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Columnar point batch: ``xyz`` (N, 3), ``intensity`` (N,), ``batch`` (N,)."""

    xyz: np.ndarray
    intensity: np.ndarray = None
    batch: np.ndarray = None

    def __post_init__(self):
        xyz = np.array(self.xyz, dtype=np.float64).reshape(-1, 3)
        n = xyz.shape[0]
        inten = np.zeros(n) if self.intensity is None else np.array(self.intensity, dtype=np.float64)
        batch = np.zeros(n, np.int64) if self.batch is None else np.array(self.batch, dtype=np.int64)
        if inten.shape != (n,) or batch.shape != (n,):
            raise DataError("intensity and batch must have one entry per point")
        if not np.isfinite(xyz).all() or not np.isfinite(inten).all():
            row = int(np.flatnonzero(~(np.isfinite(xyz).all(axis=1) & np.isfinite(inten)))[0])
            raise DataError(f"non-finite value in point {row}")
        if n:
            if batch.min() < 0:
                raise DataError("batch ids must be non-negative")
            if not (np.bincount(batch) > 0).all():
                raise DataError("batch ids must form a contiguous range starting at 0")
        object.__setattr__(self, "xyz", _readonly(xyz))
        object.__setattr__(self, "intensity", _readonly(inten))
        object.__setattr__(self, "batch", _readonly(batch))

    def __len__(self):
        return self.xyz.shape[0]

    @property
    def n_batches(self) -> int:
        return int(self.batch.max()) + 1 if len(self) else 0

    @classmethod
    def from_points(cls, points: Sequence[Point], batch_ids=None) -> "PointCloud":
        arr = np.array([tuple(p) for p in points], dtype=np.float64).reshape(-1, 4)
        return cls(arr[:, :3], arr[:, 3], batch_ids)

    def points(self):
        for (x, y, z), i in zip(self.xyz.tolist(), self.intensity.tolist()):
            yield Point(x, y, z, i)

    def select(self, mask) -> "PointCloud":
        """Subset of points; batch ids are kept as-is (may become non-contiguous)."""
        return _subset(self, mask)

    def equals(self, other: "PointCloud") -> bool:
        return (
            np.array_equal(self.xyz, other.xyz)
            and np.array_equal(self.intensity, other.intensity)
            and np.array_equal(self.batch, other.batch)
        )


def _subset(cloud, mask):
    out = object.__new__(PointCloud)
    object.__setattr__(out, "xyz", _readonly(cloud.xyz[mask]))
    object.__setattr__(out, "intensity", _readonly(cloud.intensity[mask]))
    object.__setattr__(out, "batch", _readonly(cloud.batch[mask]))
    return out


@dataclass(frozen=True)
class GtBox:
    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    yaw: float
    class_id: int

    def __post_init__(self):
        vals = (self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw)
        if not all(math.isfinite(v) for v in vals):
            raise DataError(f"non-finite box field in {self}")
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise DataError(f"box sizes must be positive, got l={self.l} w={self.w} h={self.h}")
        if not (-math.pi <= self.yaw < math.pi):
            raise DataError(f"yaw {self.yaw} outside [-pi, pi)")
        if self.class_id not in (0, 1, 2):
            raise DataError(f"class_id {self.class_id} not in {{0, 1, 2}}")

    def fields(self) -> tuple:
        return (self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw, self.class_id)


@dataclass(frozen=True)
class Detection:
    box: GtBox
    score: float
    tp: bool | None = None  # generator label, kept for supervision

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise DataError(f"score {self.score} outside [0, 1]")

    @property
    def class_id(self) -> int:
        return self.box.class_id


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    cloud: PointCloud
    gt: tuple
    seed: int
    range: tuple = DEFAULT_RANGE
    clutter: tuple = ()  # unlabeled point clusters, (x, y, radius) each

    def equals(self, other: "SyntheticScene") -> bool:
        return (
            self.seed == other.seed
            and tuple(self.gt) == tuple(other.gt)
            and tuple(self.range) == tuple(other.range)
            and tuple(self.clutter) == tuple(other.clutter)
            and self.cloud.equals(other.cloud)
        )


def derive_seed(*parts: int) -> int:
    """Stable 63-bit seed mixed from integer parts."""
    state = np.random.SeedSequence([int(p) & 0xFFFFFFFFFFFFFFFF for p in parts]).generate_state(2, dtype=np.uint32)
    return int(state[0]) << 31 | int(state[1]) >> 1


def as_range(r) -> tuple:
    """Normalize a per-axis ``[(min, max)] * 3`` range, rejecting degenerate axes."""
    try:
        out = tuple((float(lo), float(hi)) for lo, hi in r)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"range must be three (min, max) pairs: {r!r}") from exc
    if len(out) != 3:
        raise ConfigError(f"range must have three axes, got {len(out)}")
    for axis, (lo, hi) in zip("xyz", out):
        if not (math.isfinite(lo) and math.isfinite(hi)) or lo >= hi:
            raise ConfigError(f"degenerate range on axis {axis}: [{lo}, {hi})")
    return out


# -- ingestion ---------------------------------------------------------------

def load_kitti_bin(path) -> PointCloud:
    """Read a KITTI velodyne ``.bin`` file (float32 x, y, z, intensity per point)."""
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise FormatError(f"{path}: size {len(raw)} is not a multiple of 16 bytes")
    rec = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    bad = ~np.isfinite(rec).all(axis=1)
    if bad.any():
        raise DataError(f"{path}: non-finite value in record {int(np.flatnonzero(bad)[0])}")
    rec = rec.astype(np.float64)
    return PointCloud(rec[:, :3], rec[:, 3])


def kitti_bytes(cloud: PointCloud) -> bytes:
    rec = np.column_stack([cloud.xyz, cloud.intensity]).astype("<f4")
    return rec.tobytes()


def save_kitti_bin(cloud: PointCloud, path) -> None:
    Path(path).write_bytes(kitti_bytes(cloud))


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def load_csv(path) -> PointCloud:
    """Read ``batch_id,x,y,z[,intensity]`` rows; a non-numeric first line is a header."""
    text = Path(path).read_text(encoding="utf-8")
    return parse_csv(text, source=str(path))


def parse_csv(text: str, source: str = "<csv>") -> PointCloud:
    xyz, inten, batch = [], [], []
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not row or all(not f.strip() for f in row):
            continue
        if lineno == 1 and not _is_number(row[0].strip()):
            continue
        if len(row) not in (4, 5):
            raise DataError(f"{source}: line {lineno}: expected 4 or 5 fields, got {len(row)}")
        try:
            b = int(row[0])
            vals = [float(f) for f in row[1:]]
        except ValueError as exc:
            raise DataError(f"{source}: line {lineno}: cannot parse {row!r}") from exc
        if not all(math.isfinite(v) for v in vals):
            raise DataError(f"{source}: line {lineno}: non-finite value")
        batch.append(b)
        xyz.append(vals[:3])
        inten.append(vals[3] if len(vals) == 4 else 0.0)
    return PointCloud(np.array(xyz, dtype=np.float64).reshape(-1, 3), np.array(inten), np.array(batch, dtype=np.int64))


def load_cloud(path) -> PointCloud:
    """Dispatch on file type: KITTI ``.bin``, CSV, or an ``rvc-scene v1`` text file."""
    path = Path(path)
    if path.suffix == ".bin":
        return load_kitti_bin(path)
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().strip()
    if first == SCENE_MAGIC:
        return read_scene(path).cloud
    return load_csv(path)


def filter_range(cloud: PointCloud, range_) -> PointCloud:
    """Keep points with ``min <= coord < max`` on every axis, order preserved."""
    r = as_range(range_)
    lo = np.array([a for a, _ in r])
    hi = np.array([b for _, b in r])
    keep = ((cloud.xyz >= lo) & (cloud.xyz < hi)).all(axis=1)
    return cloud.select(keep)


# -- synthesis ---------------------------------------------------------------

@dataclass(frozen=True)
class SceneConfig:
    n_objects: int = 10
    points_per_object: int = 50
    ground_points: int = 2000
    range: tuple = DEFAULT_RANGE
    noise_std: float = 0.02
    seed: int = 0
    clutter_objects: int = 0  # unlabeled poles/bushes
    clutter_points: int = 40


@dataclass(frozen=True)
class ScoreModel:
    """Uniform score ranges; true positives sit higher than false positives."""

    tp_low: float = 0.25
    tp_high: float = 0.95
    fp_low: float = 0.05
    fp_high: float = 0.6


@dataclass(frozen=True)
class DetectionSimConfig:
    fp_rate: float = 0.5
    jitter_std: float = 0.1
    score_model: ScoreModel = field(default_factory=ScoreModel)
    seed: int = 0
    iou_threshold: float = 0.4
    fp_on_clutter: float = 0.0  # chance a false positive lands on a clutter cluster


def _sample_size(rng, cls):
    return tuple(float(rng.uniform(lo, hi)) for lo, hi in SIZE_PRIORS[cls])


def _sample_surface(rng, l, w, h, n):
    """Uniform samples on the five visible faces (no bottom), box frame."""
    areas = np.array([w * h, w * h, l * h, l * h, l * w])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=(n, 3)) * np.array([l, w, h])
    pts = u.copy()
    pts[face == 0, 0] = 0.5 * l
    pts[face == 1, 0] = -0.5 * l
    pts[face == 2, 1] = 0.5 * w
    pts[face == 3, 1] = -0.5 * w
    pts[face == 4, 2] = 0.5 * h
    return pts


def _to_world(local, box):
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    x = c * local[:, 0] - s * local[:, 1] + box.cx
    y = s * local[:, 0] + c * local[:, 1] + box.cy
    z = local[:, 2] + box.cz
    return np.column_stack([x, y, z])


def synth_scene(config: SceneConfig) -> SyntheticScene:
    """Generate a scene; a pure function of ``config``."""
    for name in ("n_objects", "points_per_object", "ground_points", "clutter_objects", "clutter_points"):
        if getattr(config, name) < 0:
            raise ConfigError(f"{name} must be >= 0")
    rng_ = as_range(config.range)
    (x0, x1), (y0, y1), (z0, z1) = rng_
    if not (z0 <= 0.0 < z1):
        raise ConfigError("z range must contain the ground plane z=0")
    rng = np.random.default_rng(config.seed)

    boxes: list[GtBox] = []
    radii: list[float] = []
    for i in range(config.n_objects):
        cls = int(rng.integers(3))
        l, w, h = _sample_size(rng, cls)
        yaw = wrap_yaw(float(rng.uniform(-math.pi, math.pi)))
        r = 0.5 * math.hypot(l, w)
        if 2 * r >= min(x1 - x0, y1 - y0) or h >= z1:
            raise GenerationError("scene range too small for object sizes")
        for _ in range(PLACEMENT_ATTEMPTS):
            cx = float(rng.uniform(x0 + r, x1 - r))
            cy = float(rng.uniform(y0 + r, y1 - r))
            if all(math.hypot(cx - b.cx, cy - b.cy) > r + rb for b, rb in zip(boxes, radii)):
                break
        else:
            raise GenerationError(f"could not place object {i} without overlap after {PLACEMENT_ATTEMPTS} attempts")
        boxes.append(GtBox(cx, cy, 0.5 * h, l, w, h, yaw, cls))
        radii.append(r)

    clutter = []
    for i in range(config.clutter_objects):
        r = float(rng.uniform(0.4, 1.2))
        taken = list(zip(((b.cx, b.cy) for b in boxes), radii)) + [((x, y), rc) for x, y, rc in clutter]
        for _ in range(PLACEMENT_ATTEMPTS):
            cx = float(rng.uniform(x0 + r, x1 - r))
            cy = float(rng.uniform(y0 + r, y1 - r))
            if all(math.hypot(cx - px, cy - py) > r + rb for (px, py), rb in taken):
                break
        else:
            raise GenerationError(f"could not place clutter cluster {i} after {PLACEMENT_ATTEMPTS} attempts")
        clutter.append((cx, cy, r))

    chunks, inten = [], []
    for box in boxes:
        local = _sample_surface(rng, box.l, box.w, box.h, config.points_per_object)
        pts = _to_world(local, box) + rng.normal(0.0, config.noise_std, size=local.shape)
        chunks.append(pts)
        inten.append(rng.uniform(0.2, 1.0, size=len(pts)))
    for cx, cy, r in clutter:
        n = config.clutter_points
        rad = r * np.sqrt(rng.uniform(0.0, 1.0, size=n))
        ang = rng.uniform(-math.pi, math.pi, size=n)
        top = float(rng.uniform(0.5, min(2.5, z1 - 0.01)))
        chunks.append(np.column_stack([cx + rad * np.cos(ang), cy + rad * np.sin(ang), rng.uniform(0.0, top, size=n)]))
        inten.append(rng.uniform(0.0, 0.6, size=n))
    n = config.ground_points
    ground = np.column_stack([
        rng.uniform(x0, x1, size=n),
        rng.uniform(y0, y1, size=n),
        rng.normal(0.0, config.noise_std, size=n),
    ])
    chunks.append(ground)
    inten.append(rng.uniform(0.0, 0.3, size=n))

    xyz = np.concatenate(chunks) if chunks else np.zeros((0, 3))
    cloud = filter_range(PointCloud(xyz, np.concatenate(inten)), rng_)
    return SyntheticScene(cloud, tuple(boxes), int(config.seed), rng_, tuple(clutter))


def _jitter(rng, box, std):
    s = 0.5 * std  # relative size jitter scale
    return GtBox(
        box.cx + float(rng.normal(0, std)),
        box.cy + float(rng.normal(0, std)),
        box.cz + float(rng.normal(0, std)),
        box.l * math.exp(float(rng.normal(0, s))),
        box.w * math.exp(float(rng.normal(0, s))),
        box.h * math.exp(float(rng.normal(0, s))),
        wrap_yaw(box.yaw + float(rng.normal(0, std))),
        box.class_id,
    )


def synth_detections(scene: SyntheticScene, config: DetectionSimConfig) -> list:
    """Simulated detector output with generator TP/FP labels in ``Detection.tp``.

    Each ground-truth box yields one jittered true positive (IoU >= threshold
    with its own box, below it with every other).  False positives are random
    boxes with IoU below the threshold against all ground truth; their count
    makes the false-positive fraction ``fp_rate``.  With ``fp_on_clutter`` > 0
    some of them are centered on the scene's unlabeled clutter clusters.
    """
    if not (0.0 <= config.fp_on_clutter <= 1.0):
        raise ConfigError(f"fp_on_clutter must be in [0, 1], got {config.fp_on_clutter}")
    if not (0.0 <= config.fp_rate <= 1.0):
        raise ConfigError(f"fp_rate must be in [0, 1], got {config.fp_rate}")
    sm = config.score_model
    if not (0 <= sm.tp_low <= sm.tp_high <= 1 and 0 <= sm.fp_low <= sm.fp_high <= 1):
        raise ConfigError("score model ranges must lie in [0, 1] with low <= high")
    gts = list(scene.gt)
    if config.fp_rate >= 1.0 and gts:
        raise ConfigError("fp_rate=1 is unreachable: every ground-truth box emits a true positive")
    thr = config.iou_threshold
    rng = np.random.default_rng(config.seed)
    dets = []
    for gi, g in enumerate(gts):
        for _ in range(PLACEMENT_ATTEMPTS):
            cand = _jitter(rng, g, config.jitter_std)
            if bev_iou(cand, g) >= thr and all(bev_iou(cand, o) < thr for j, o in enumerate(gts) if j != gi):
                break
        else:
            cand = g
        dets.append(Detection(cand, float(rng.uniform(sm.tp_low, sm.tp_high)), True))

    n_fp = 0 if not gts else int(round(len(gts) * config.fp_rate / (1.0 - config.fp_rate)))
    (x0, x1), (y0, y1), _ = scene.range
    for k in range(n_fp):
        cls = int(rng.integers(3))
        l, w, h = _sample_size(rng, cls)
        yaw = wrap_yaw(float(rng.uniform(-math.pi, math.pi)))
        r = 0.5 * math.hypot(l, w)
        on_clutter = bool(scene.clutter) and float(rng.uniform()) < config.fp_on_clutter
        for _ in range(PLACEMENT_ATTEMPTS):
            if on_clutter:
                sx, sy, _ = scene.clutter[int(rng.integers(len(scene.clutter)))]
                cx = min(max(sx + float(rng.normal(0.0, 0.2)), x0 + r), x1 - r)
                cy = min(max(sy + float(rng.normal(0.0, 0.2)), y0 + r), y1 - r)
            else:
                cx, cy = float(rng.uniform(x0 + r, x1 - r)), float(rng.uniform(y0 + r, y1 - r))
            cand = GtBox(cx, cy, 0.5 * h, l, w, h, yaw, cls)
            if all(bev_iou(cand, g) < thr for g in gts):
                break
        else:
            raise GenerationError(f"could not place false positive {k} away from ground truth")
        dets.append(Detection(cand, float(rng.uniform(sm.fp_low, sm.fp_high)), False))
    return dets


# -- text serialization ------------------------------------------------------

def _f(x: float) -> str:
    return repr(float(x))


def _box_fields(b: GtBox) -> list:
    return [_f(b.cx), _f(b.cy), _f(b.cz), _f(b.l), _f(b.w), _f(b.h), _f(b.yaw), str(b.class_id)]


def _parse_box(fields, where):
    try:
        vals = [float(v) for v in fields[:7]]
        return GtBox(*vals, int(fields[7]))
    except (ValueError, IndexError) as exc:
        raise FormatError(f"{where}: bad box record") from exc


def scene_text(scene: SyntheticScene) -> str:
    lines = [SCENE_MAGIC, f"seed {scene.seed}"]
    lines.append("range " + " ".join(_f(v) for pair in scene.range for v in pair))
    c = scene.cloud
    lines.append(f"counts {len(scene.gt)} {len(c)}")
    for b in scene.gt:
        lines.append("box " + " ".join(_box_fields(b)))
    for x, y, r in scene.clutter:
        lines.append(f"clutter {_f(x)} {_f(y)} {_f(r)}")
    for (x, y, z), i, bid in zip(c.xyz.tolist(), c.intensity.tolist(), c.batch.tolist()):
        lines.append(f"pt {bid} {_f(x)} {_f(y)} {_f(z)} {_f(i)}")
    return "\n".join(lines) + "\n"


def write_scene(scene: SyntheticScene, path) -> None:
    Path(path).write_text(scene_text(scene), encoding="utf-8")


def _header(lines, magic, path):
    if not lines or lines[0].strip() != magic:
        raise FormatError(f"{path}: missing '{magic}' header")


def read_scene(path) -> SyntheticScene:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    _header(lines, SCENE_MAGIC, path)
    seed, rng_, counts = None, DEFAULT_RANGE, None
    boxes, pts, clutter = [], [], []
    for n, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        tag, rest = parts[0], parts[1:]
        where = f"{path}:{n}"
        try:
            if tag == "seed":
                seed = int(rest[0])
            elif tag == "range":
                v = [float(x) for x in rest]
                rng_ = as_range(((v[0], v[1]), (v[2], v[3]), (v[4], v[5])))
            elif tag == "counts":
                counts = (int(rest[0]), int(rest[1]))
            elif tag == "box":
                boxes.append(_parse_box(rest, where))
            elif tag == "clutter":
                clutter.append(tuple(float(x) for x in rest[:3]))
            elif tag == "pt":
                pts.append((int(rest[0]), *(float(x) for x in rest[1:5])))
            else:
                raise FormatError(f"{where}: unknown record '{tag}'")
        except (ValueError, IndexError) as exc:
            raise FormatError(f"{where}: malformed '{tag}' record") from exc
    if counts is not None and counts != (len(boxes), len(pts)):
        raise FormatError(f"{path}: counts line says {counts}, found {(len(boxes), len(pts))}")
    arr = np.array(pts, dtype=np.float64).reshape(-1, 5)
    cloud = PointCloud(arr[:, 1:4], arr[:, 4], arr[:, 0].astype(np.int64))
    return SyntheticScene(cloud, tuple(boxes), 0 if seed is None else seed, rng_, tuple(clutter))


def detections_text(dets) -> str:
    lines = [DETS_MAGIC]
    for d in dets:
        tp = "-" if d.tp is None else str(int(d.tp))
        lines.append("det " + " ".join(_box_fields(d.box)) + f" {_f(d.score)} {tp}")
    return "\n".join(lines) + "\n"


def write_detections(dets, path) -> None:
    Path(path).write_text(detections_text(dets), encoding="utf-8")


def read_detections(path) -> list:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    _header(lines, DETS_MAGIC, path)
    out = []
    for n, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        where = f"{path}:{n}"
        if parts[0] != "det" or len(parts) != 11:
            raise FormatError(f"{where}: expected 'det' record with 10 fields")
        box = _parse_box(parts[1:9], where)
        try:
            score = float(parts[9])
        except ValueError as exc:
            raise FormatError(f"{where}: bad score") from exc
        tp = None if parts[10] == "-" else bool(int(parts[10]))
        out.append(Detection(box, score, tp))
    return out
