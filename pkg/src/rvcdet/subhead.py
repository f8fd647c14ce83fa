"""Heatmap-crop classification sub-head.

Each detection's location is mapped to a BEV cell, a k x k window of the
3-channel class heatmap around it is cut out, and a small classifier labels
the crop as a true or false detection of its class.  Detections judged false
are dropped.

The heatmaps here are simulated.  A true detection sits on a clean, box-shaped
Gaussian peak whose height is the detector score.  A false one sits on an
isotropic peak surrounded by weak clutter blobs, the signature of spurious
responses.  The center cell alone mostly reveals the score; wider windows
expose the neighbourhood.
"""

import math
import struct
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from ._parallel import ordered_map
from .checkpoint import load_checkpoint, save_checkpoint
from .cloudio import CLASS_NAMES, DetectionSimConfig, derive_seed, synth_detections
from .errors import ConfigError, DataError, FormatError
from .evaluation import match
from .fdv import GridConfig
from .rvbackbone import FeatureMap
from .tinynn import AdamConfig, Conv2d, Flatten, Linear, ReLU, Sequential, adam_init, adam_step, cross_entropy, softmax

__all__ = [
    "KINDS",
    "LABEL_NAMES",
    "ClassifierSpec",
    "build_network",
    "param_count",
    "label_of",
    "GaussianHeatmapConfig",
    "HeatmapSimConfig",
    "render_heatmap",
    "simulate_heatmap",
    "HeatmapCrop",
    "crop_window",
    "crop_windows",
    "CropDataset",
    "CropDatasetConfig",
    "build_crop_dataset",
    "save_crops",
    "load_crops",
    "TrainConfig",
    "EpochStats",
    "SubheadModel",
    "TrainResult",
    "train_subhead",
    "Refined",
    "refine",
]

KINDS = ("MLP-1", "MLP-2", "MLP-3", "MLP-4", "1Conv+MLP-2", "2Conv+MLP-2")
LABEL_NAMES = tuple(f"{tf} {c}" for c in CLASS_NAMES for tf in ("True", "False"))
N_CHANNELS = len(CLASS_NAMES)
MAX_WINDOW = 10
CROPS_MAGIC = b"rvc-crops v1\n"


# -- architecture zoo --------------------------------------------------------

@dataclass(frozen=True)
class ClassifierSpec:
    kind: str = "MLP-2"
    k: int = 9
    out_dim: int = 6

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown classifier kind {self.kind!r}; choose from {', '.join(KINDS)}")
        if not (1 <= self.k <= MAX_WINDOW):
            raise ConfigError(f"window size k={self.k} outside 1..{MAX_WINDOW}")
        if "Conv" in self.kind and self.k < 3:
            raise ConfigError(f"{self.kind} needs k >= 3, got k={self.k}")
        if self.out_dim not in (2, 6):
            raise ConfigError(f"out_dim must be 6 (true/false per class) or 2 (true/false), got {self.out_dim}")

    @property
    def input_dim(self) -> int:
        return self.k * self.k * N_CHANNELS


def _mlp_head(n_in, kind, out):
    if kind == "MLP-1":
        return [Linear(n_in, out)]
    hidden = 2 * n_in
    layers = [Linear(n_in, hidden), ReLU()]
    if kind == "MLP-2":
        return layers + [Linear(hidden, out)]
    layers += [Linear(hidden, 24), ReLU()]
    if kind == "MLP-3":
        return layers + [Linear(24, out)]
    return layers + [Linear(24, 6), ReLU(), Linear(6, out)]


def build_network(spec: ClassifierSpec) -> Sequential:
    """Network taking crops shaped (batch, 3, k, k)."""
    k, out = spec.k, spec.out_dim
    if spec.kind == "1Conv+MLP-2":
        convs = [Conv2d(3, 6), ReLU()]
        n_in = 6 * (k - 1) ** 2
    elif spec.kind == "2Conv+MLP-2":
        convs = [Conv2d(3, 6), ReLU(), Conv2d(6, 12), ReLU()]
        n_in = 12 * (k - 2) ** 2
    else:
        convs = []
        n_in = spec.input_dim
    kind = "MLP-2" if convs else spec.kind
    return Sequential(convs + [Flatten()] + _mlp_head(n_in, kind, out))


def param_count(spec: ClassifierSpec) -> int:
    total = 0
    for layer in build_network(spec).layers:
        if isinstance(layer, Linear):
            total += layer.n_in * layer.n_out + layer.n_out
        elif isinstance(layer, Conv2d):
            total += layer.c_out * layer.c_in * layer.kernel[0] * layer.kernel[1] + layer.c_out
    return total


def label_of(class_id: int, is_true: bool, out_dim: int = 6) -> int:
    if out_dim == 2:
        return 0 if is_true else 1
    return 2 * class_id + (0 if is_true else 1)


# -- heatmaps ----------------------------------------------------------------

@dataclass(frozen=True)
class GaussianHeatmapConfig:
    sigma: float = 1.0  # cells
    peak: float = 1.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigError("heatmap sigma must be > 0")


def _splat(channel, row, col, amp, s_along, s_across, yaw):
    H, W = channel.shape
    rad = int(math.ceil(4.0 * max(s_along, s_across)))
    r0, r1 = max(row - rad, 0), min(row + rad + 1, H)
    c0, c1 = max(col - rad, 0), min(col + rad + 1, W)
    if r0 >= r1 or c0 >= c1:
        return
    dy = np.arange(r0, r1)[:, None] - row
    dx = np.arange(c0, c1)[None, :] - col
    if s_along == s_across:
        g = np.exp(-(dx * dx + dy * dy) / (2.0 * s_along * s_along))
    else:
        c, s = math.cos(yaw), math.sin(yaw)
        u = c * dx + s * dy
        v = -s * dx + c * dy
        g = np.exp(-0.5 * (u * u / (s_along * s_along) + v * v / (s_across * s_across)))
    np.maximum(channel[r0:r1, c0:c1], amp * g, out=channel[r0:r1, c0:c1])


def render_heatmap(boxes, grid: GridConfig, cfg: GaussianHeatmapConfig = GaussianHeatmapConfig(),
                   peaks=None, sigmas=None) -> FeatureMap:
    """Max-composited Gaussian peaks, one channel per class.

    A box's peak sits on the cell containing its center.  ``peaks`` overrides
    per-box amplitude; ``sigmas`` gives per-box ``(along, across)`` widths in
    cells, oriented by the box yaw.  Boxes outside the grid are ignored.
    """
    hm = np.zeros((N_CHANNELS, grid.height, grid.width))
    for i, b in enumerate(boxes):
        cell = grid.cell_of(b.cx, b.cy)
        if cell is None:
            continue
        amp = cfg.peak if peaks is None else float(peaks[i])
        sa, sc = (cfg.sigma, cfg.sigma) if sigmas is None else (float(sigmas[i][0]), float(sigmas[i][1]))
        _splat(hm[b.class_id], cell[0], cell[1], amp, sa, sc, b.yaw)
    return FeatureMap(hm)


@dataclass(frozen=True)
class HeatmapSimConfig:
    """How a simulated detector heatmap renders true and false detections."""

    tp_extent_scale: float = 0.35  # true peak sigma = scale * box size / voxel
    min_sigma: float = 0.6
    fp_sigma: tuple = (0.6, 1.6)
    clutter_blobs: tuple = (2, 5)  # per false positive, inclusive
    clutter_radius: float = 4.0  # cells
    clutter_amp: tuple = (0.25, 0.7)  # relative to the detection score
    noise_std: float = 0.02
    missed_peak: float = 0.3
    seed: int = 0


def simulate_heatmap(gt, dets, result, grid: GridConfig, cfg: HeatmapSimConfig, seed: int) -> FeatureMap:
    """Detector heatmap for one scene, given detections and their match result."""
    rng = np.random.default_rng(seed)
    vx = grid.voxel_size[0]
    peaks, sigmas, boxes = [], [], []
    matched_score = {int(j): dets[i].score for i, j in enumerate(result.det_gt) if j >= 0}
    for j, g in enumerate(gt):
        boxes.append(g)
        peaks.append(matched_score.get(j, cfg.missed_peak))
        sigmas.append((max(cfg.tp_extent_scale * g.l / vx, cfg.min_sigma),
                       max(cfg.tp_extent_scale * g.w / vx, cfg.min_sigma)))
    hm = render_heatmap(boxes, grid, peaks=peaks, sigmas=sigmas).data

    for i, d in enumerate(dets):
        if result.det_tp[i]:
            continue
        cell = grid.cell_of(d.box.cx, d.box.cy)
        s = float(rng.uniform(*cfg.fp_sigma))
        n_blobs = int(rng.integers(cfg.clutter_blobs[0], cfg.clutter_blobs[1] + 1))
        offsets = rng.uniform(-cfg.clutter_radius, cfg.clutter_radius, size=(n_blobs, 2))
        amps = rng.uniform(*cfg.clutter_amp, size=n_blobs) * d.score
        chans = rng.integers(N_CHANNELS, size=n_blobs)
        widths = rng.uniform(0.5, 1.0, size=n_blobs)
        if cell is None:
            continue
        _splat(hm[d.class_id], cell[0], cell[1], d.score, s, s, 0.0)
        for (dr, dc), a, ch, w in zip(offsets, amps, chans, widths):
            _splat(hm[ch], cell[0] + int(round(dr)), cell[1] + int(round(dc)), a, w, w, 0.0)

    if cfg.noise_std > 0:
        hm = hm + rng.normal(0.0, cfg.noise_std, size=hm.shape)
    return FeatureMap(np.clip(hm, 0.0, 1.0))


# -- crops -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class HeatmapCrop:
    window: np.ndarray  # (3, k, k), channel-major
    detection: object = None
    label: int | None = None


def _center_offset(k: int) -> int:
    return (k + 1) // 2 - 1  # ceil(k/2) - 1


def crop_windows(hm: FeatureMap, dets, grid: GridConfig, k: int):
    """Windows for many detections; returns (windows (n, 3, k, k), valid mask)."""
    if k < 1:
        raise ConfigError("window size must be >= 1")
    data = hm.data
    padded = np.pad(data, ((0, 0), (k, k), (k, k)))
    off = _center_offset(k)
    out = np.zeros((len(dets), data.shape[0], k, k))
    valid = np.zeros(len(dets), dtype=bool)
    for i, d in enumerate(dets):
        box = getattr(d, "box", d)
        cell = grid.cell_of(box.cx, box.cy)
        if cell is None:
            continue
        r = cell[0] - off + k
        c = cell[1] - off + k
        out[i] = padded[:, r:r + k, c:c + k]
        valid[i] = True
    return out, valid


def crop_window(hm: FeatureMap, det, grid: GridConfig, k: int):
    """Single crop, or None when the detection center lies outside the grid."""
    win, valid = crop_windows(hm, [det], grid, k)
    return HeatmapCrop(win[0], det) if valid[0] else None


@dataclass(frozen=True, eq=False)
class CropDataset:
    windows: np.ndarray  # (n, 3, k, k)
    labels: np.ndarray  # (n,)

    @property
    def k(self) -> int:
        return self.windows.shape[-1]

    def __len__(self):
        return self.labels.shape[0]

    def counts(self, out_dim: int = 6) -> np.ndarray:
        return np.bincount(self.labels, minlength=out_dim)

    def subcrop(self, k: int) -> "CropDataset":
        """Centered k x k sub-window, consistent with the crop centering rule."""
        K = self.k
        if k > K:
            raise ConfigError(f"cannot take a {k}x{k} sub-window of {K}x{K} crops")
        s = _center_offset(K) - _center_offset(k)
        return CropDataset(self.windows[:, :, s:s + k, s:s + k].copy(), self.labels)

    def relabel_binary(self) -> "CropDataset":
        return CropDataset(self.windows, (self.labels % 2).astype(np.int64))


@dataclass(frozen=True)
class CropDatasetConfig:
    k: int = MAX_WINDOW
    per_class: int | None = None
    seed: int = 0
    heatmap: HeatmapSimConfig = field(default_factory=HeatmapSimConfig)


def scene_detections(scene, detector_sim: DetectionSimConfig):
    """Per-scene detector simulation with a seed tied to the scene."""
    return synth_detections(scene, replace(detector_sim, seed=derive_seed(detector_sim.seed, scene.seed)))


def scene_heatmap(scene, dets, result, grid, cfg: HeatmapSimConfig) -> FeatureMap:
    return simulate_heatmap(scene.gt, dets, result, grid, cfg, derive_seed(cfg.seed, scene.seed))


def build_crop_dataset(scenes, detector_sim: DetectionSimConfig, grid: GridConfig, cfg: CropDatasetConfig):
    """Labeled crops from simulated detections; returns (dataset, achieved per-label counts)."""

    def one(scene):
        dets = scene_detections(scene, detector_sim)
        res = match(dets, scene.gt)
        hm = scene_heatmap(scene, dets, res, grid, cfg.heatmap)
        win, valid = crop_windows(hm, dets, grid, cfg.k)
        labels = np.array([label_of(d.class_id, bool(tp)) for d, tp in zip(dets, res.det_tp)], dtype=np.int64)
        return win[valid], labels[valid]

    parts = ordered_map(one, scenes)
    if parts:
        windows = np.concatenate([w for w, _ in parts])
        labels = np.concatenate([lab for _, lab in parts])
    else:
        windows = np.zeros((0, N_CHANNELS, cfg.k, cfg.k))
        labels = np.zeros(0, dtype=np.int64)

    if cfg.per_class is not None:
        rng = np.random.default_rng(cfg.seed)
        keep = []
        for lab in range(len(LABEL_NAMES)):
            idx = np.flatnonzero(labels == lab)
            if idx.size > cfg.per_class:
                idx = np.sort(rng.choice(idx, size=cfg.per_class, replace=False))
            keep.append(idx)
        keep = np.sort(np.concatenate(keep))
        windows, labels = windows[keep], labels[keep]
    counts = np.bincount(labels, minlength=len(LABEL_NAMES))
    if cfg.per_class is not None and (counts < cfg.per_class).any():
        short = {LABEL_NAMES[i]: int(c) for i, c in enumerate(counts) if c < cfg.per_class}
        warnings.warn(f"fewer than {cfg.per_class} crops for {short}", RuntimeWarning, stacklevel=2)
    return CropDataset(windows, labels), counts


def save_crops(dataset: CropDataset, path) -> None:
    """``rvc-crops v1``: magic, uint32 count, then (uint32 k, uint32 label, 3*k*k float32) records."""
    k = dataset.k
    parts = [CROPS_MAGIC, struct.pack("<I", len(dataset))]
    for win, lab in zip(dataset.windows, dataset.labels):
        parts.append(struct.pack("<II", k, int(lab)))
        parts.append(win.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_crops(path) -> CropDataset:
    raw = Path(path).read_bytes()
    if not raw.startswith(CROPS_MAGIC):
        raise FormatError(f"{path}: not an rvc-crops v1 file")
    pos = len(CROPS_MAGIC)
    (n,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    wins, labels, k0 = [], [], None
    for i in range(n):
        if pos + 8 > len(raw):
            raise FormatError(f"{path}: truncated at record {i}")
        k, lab = struct.unpack_from("<II", raw, pos)
        pos += 8
        if k0 is None:
            k0 = k
        elif k != k0:
            raise FormatError(f"{path}: record {i} has k={k}, expected {k0}")
        size = N_CHANNELS * k * k * 4
        if pos + size > len(raw):
            raise FormatError(f"{path}: truncated at record {i}")
        wins.append(np.frombuffer(raw, dtype="<f4", count=N_CHANNELS * k * k, offset=pos).reshape(N_CHANNELS, k, k))
        labels.append(lab)
        pos += size
    if pos != len(raw):
        raise FormatError(f"{path}: trailing bytes")
    if not wins:
        return CropDataset(np.zeros((0, N_CHANNELS, 1, 1)), np.zeros(0, dtype=np.int64))
    return CropDataset(np.stack(wins).astype(np.float64), np.array(labels, dtype=np.int64))


# -- training ----------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 64
    val_fraction: float = 0.2
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    recall: tuple  # per label; None where the label is absent from validation


@dataclass(eq=False)
class SubheadModel:
    spec: ClassifierSpec
    params: list

    def __post_init__(self):
        self.network = build_network(self.spec)

    def logits(self, windows) -> np.ndarray:
        x = np.asarray(windows, dtype=np.float64)
        if x.ndim != 4 or x.shape[1:] != (N_CHANNELS, self.spec.k, self.spec.k):
            raise DataError(f"crops must be (n, {N_CHANNELS}, {self.spec.k}, {self.spec.k}), got {x.shape}")
        return self.network.predict(self.params, x)

    def predict(self, windows) -> np.ndarray:
        if len(windows) == 0:
            return np.zeros(0, dtype=np.int64)
        return np.argmax(self.logits(windows), axis=1)

    def probabilities(self, windows) -> np.ndarray:
        return softmax(self.logits(windows))

    def save(self, path) -> None:
        save_checkpoint(path, self.params, {"kind": "subhead", "spec": asdict(self.spec)})

    @classmethod
    def load(cls, path) -> "SubheadModel":
        tensors, meta = load_checkpoint(path)
        if meta.get("kind") != "subhead":
            raise FormatError(f"{path}: not a sub-head checkpoint")
        spec = ClassifierSpec(**meta["spec"])
        shapes = [p.shape for p in build_network(spec).init(np.random.default_rng(0))]
        if [t.shape for t in tensors] != shapes:
            raise FormatError(f"{path}: tensor shapes do not match {spec}")
        return cls(spec, tensors)


@dataclass(eq=False)
class TrainResult:
    model: SubheadModel
    history: list

    @property
    def final(self) -> EpochStats:
        return self.history[-1]

    @property
    def best_val_accuracy(self) -> float:
        return max(h.val_accuracy for h in self.history)


def _split(labels, val_fraction, rng):
    train, val = [], []
    for lab in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == lab))
        n_val = int(round(val_fraction * idx.size))
        val.append(idx[:n_val])
        train.append(idx[n_val:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


def evaluate_model(model: SubheadModel, windows, labels):
    """(loss, accuracy, per-label recall) on a labeled set."""
    if len(labels) == 0:
        return float("nan"), float("nan"), tuple([None] * model.spec.out_dim)
    logits = model.logits(windows)
    loss, _ = cross_entropy(logits, labels)
    pred = np.argmax(logits, axis=1)
    recall = []
    for lab in range(model.spec.out_dim):
        m = labels == lab
        recall.append(float(np.mean(pred[m] == lab)) if m.any() else None)
    return loss, float(np.mean(pred == labels)), tuple(recall)


def train_subhead(dataset: CropDataset, spec: ClassifierSpec, cfg: TrainConfig = TrainConfig()) -> TrainResult:
    """Cross-entropy + Adam; deterministic in ``cfg.seed``."""
    if len(dataset) == 0:
        raise DataError("cannot train on an empty crop dataset")
    labels = np.asarray(dataset.labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= spec.out_dim:
        raise DataError(f"labels must lie in [0, {spec.out_dim})")
    if dataset.k < spec.k:
        raise ConfigError(f"crops are {dataset.k}x{dataset.k}, spec needs {spec.k}x{spec.k}")
    data = dataset.subcrop(spec.k) if dataset.k != spec.k else dataset
    counts = np.bincount(labels, minlength=spec.out_dim)
    if counts.min() == 0 or counts.max() > 1.5 * counts.min():
        warnings.warn(f"unbalanced training labels: {counts.tolist()}", RuntimeWarning, stacklevel=2)

    rng = np.random.default_rng(cfg.seed)
    tr, va = _split(labels, cfg.val_fraction, rng)
    net = build_network(spec)
    params = net.init(rng)
    state = adam_init(params, AdamConfig(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps))
    x_tr, y_tr = data.windows[tr], labels[tr]
    x_va, y_va = data.windows[va], labels[va]
    model = SubheadModel(spec, params)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(tr))
        total = 0.0
        for s in range(0, len(order), cfg.batch_size):
            b = order[s:s + cfg.batch_size]
            out, caches = net.forward(params, x_tr[b])
            loss, g = cross_entropy(out, y_tr[b])
            grads = net.backward(params, caches, g)
            params, state = adam_step(params, grads, state)
            total += loss * len(b)
        model.params = params
        val_loss, acc, rec = evaluate_model(model, x_va, y_va)
        history.append(EpochStats(epoch, total / max(len(tr), 1), val_loss, acc, rec))
    return TrainResult(model, history)


# -- refinement --------------------------------------------------------------

class Refined(NamedTuple):
    kept: list
    dropped: list
    unclassified: list  # subset of ``kept`` whose center fell outside the grid


def refine(dets, hm: FeatureMap, model: SubheadModel, grid: GridConfig) -> Refined:
    """Keep a detection iff the classifier calls it true for its own class."""
    dets = list(dets)
    if not dets:
        return Refined([], [], [])
    windows, valid = crop_windows(hm, dets, grid, model.spec.k)
    pred = np.full(len(dets), -1, dtype=np.int64)
    if valid.any():
        pred[valid] = model.predict(windows[valid])
    kept, dropped, uncls = [], [], []
    for d, ok, p in zip(dets, valid, pred):
        if not ok:
            kept.append(d)
            uncls.append(d)
        elif p == label_of(d.class_id, True, model.spec.out_dim):
            kept.append(d)
        else:
            dropped.append(d)
    return Refined(kept, dropped, uncls)
