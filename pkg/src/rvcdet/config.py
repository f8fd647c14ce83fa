"""Experiment configuration: flat ``key = value`` INI sections with explicit seeds.

Every value is written with ``repr`` precision so a config survives a
save/load round trip unchanged.
"""

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .cloudio import DetectionSimConfig, SceneConfig, ScoreModel, derive_seed
from .errors import ConfigError
from .fdv import compute_grid
from .subhead import ClassifierSpec, CropDatasetConfig, HeatmapSimConfig, TrainConfig


@dataclass(frozen=True)
class GridSection:
    range: tuple = (-40.0, -40.0, -3.0, 40.0, 40.0, 3.0)  # xmin, ymin, zmin, xmax, ymax, zmax
    voxel: tuple = (0.5, 0.5)


@dataclass(frozen=True)
class SynthSection:
    n_scenes: int = 200
    n_objects: int = 10
    points_per_object: int = 50
    ground_points: int = 2000
    noise_std: float = 0.02
    clutter_objects: int = 12
    clutter_points: int = 40
    seed: int = 0


@dataclass(frozen=True)
class DetectionsSection:
    fp_rate: float = 0.5
    jitter_std: float = 0.1
    tp_low: float = 0.25
    tp_high: float = 0.95
    fp_low: float = 0.05
    fp_high: float = 0.6
    fp_on_clutter: float = 0.7
    iou_threshold: float = 0.4
    seed: int = 0


@dataclass(frozen=True)
class HeatmapSection:
    tp_extent_scale: float = 0.35
    min_sigma: float = 0.6
    fp_sigma: tuple = (0.6, 1.6)
    clutter_blobs: tuple = (2, 5)
    clutter_radius: float = 4.0
    clutter_amp: tuple = (0.25, 0.7)
    noise_std: float = 0.02
    missed_peak: float = 0.3
    seed: int = 0


@dataclass(frozen=True)
class ClassifierSection:
    kinds: tuple = ("MLP-2",)
    ks: tuple = (9,)
    out_dim: int = 6


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 64
    val_fraction: float = 0.2
    seed: int = 0
    train_scenes: int = 420
    per_class: int = 1000
    crop_k: int = 10


@dataclass(frozen=True)
class BackboneSection:
    plan: tuple = (9, 32, 64)
    seed: int = 0


@dataclass(frozen=True)
class EvalSection:
    point_threshold: int = 5
    score_threshold: float = 0.3
    iou_threshold: float = 0.4


@dataclass(frozen=True)
class OutputSection:
    dir: str = "rvc-out"


@dataclass(frozen=True)
class ExperimentConfig:
    grid: GridSection = field(default_factory=GridSection)
    synth: SynthSection = field(default_factory=SynthSection)
    detections: DetectionsSection = field(default_factory=DetectionsSection)
    heatmap: HeatmapSection = field(default_factory=HeatmapSection)
    classifier: ClassifierSection = field(default_factory=ClassifierSection)
    train: TrainSection = field(default_factory=TrainSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    eval: EvalSection = field(default_factory=EvalSection)
    output: OutputSection = field(default_factory=OutputSection)

    # -- conversions to library configs -----------------------------------

    def cloud_range(self) -> tuple:
        r = self.grid.range
        return ((r[0], r[3]), (r[1], r[4]), (r[2], r[5]))

    def make_grid(self):
        return compute_grid(self.cloud_range(), self.grid.voxel)

    def scene_config(self, index: int, stream: int = 0) -> SceneConfig:
        s = self.synth
        return SceneConfig(
            n_objects=s.n_objects,
            points_per_object=s.points_per_object,
            ground_points=s.ground_points,
            range=self.cloud_range(),
            noise_std=s.noise_std,
            seed=derive_seed(s.seed, stream, index),
            clutter_objects=s.clutter_objects,
            clutter_points=s.clutter_points,
        )

    def detection_sim(self) -> DetectionSimConfig:
        d = self.detections
        return DetectionSimConfig(
            fp_rate=d.fp_rate,
            jitter_std=d.jitter_std,
            score_model=ScoreModel(d.tp_low, d.tp_high, d.fp_low, d.fp_high),
            seed=d.seed,
            iou_threshold=d.iou_threshold,
            fp_on_clutter=d.fp_on_clutter,
        )

    def heatmap_sim(self) -> HeatmapSimConfig:
        return HeatmapSimConfig(**dataclasses.asdict(self.heatmap))

    def crop_config(self) -> CropDatasetConfig:
        t = self.train
        return CropDatasetConfig(k=t.crop_k, per_class=t.per_class, seed=t.seed, heatmap=self.heatmap_sim())

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(epochs=t.epochs, lr=t.lr, batch_size=t.batch_size, val_fraction=t.val_fraction, seed=t.seed)

    def classifier_specs(self):
        """(kind, k, spec or None) over the ablation grid; None marks an invalid cell."""
        out = []
        for kind in self.classifier.kinds:
            for k in self.classifier.ks:
                try:
                    out.append((kind, k, ClassifierSpec(kind, k, self.classifier.out_dim)))
                except ConfigError:
                    if "Conv" in kind and k < 3:
                        out.append((kind, k, None))
                    else:
                        raise
        return out

    # -- overrides and file I/O -------------------------------------------

    def with_value(self, dotted: str, raw: str) -> "ExperimentConfig":
        try:
            section, key = dotted.split(".", 1)
            sec = getattr(self, section)
            default = getattr(sec, key)
        except (ValueError, AttributeError) as exc:
            raise ConfigError(f"unknown config key {dotted!r}") from exc
        new_sec = dataclasses.replace(sec, **{key: _parse(raw, default, dotted)})
        return dataclasses.replace(self, **{section: new_sec})

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            sec = getattr(self, f.name)
            lines.append(f"[{f.name}]")
            for sf in dataclasses.fields(sec):
                lines.append(f"{sf.name} = {_fmt(getattr(sec, sf.name))}")
            lines.append("")
        return "\n".join(lines)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "ExperimentConfig":
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigError(f"{source}: {exc}") from exc
        cfg = cls()
        names = {f.name for f in dataclasses.fields(cls)}
        for section in cp.sections():
            if section not in names:
                raise ConfigError(f"{source}: unknown section [{section}]")
            for key, raw in cp.items(section):
                cfg = cfg.with_value(f"{section}.{key}", raw)
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text, str(path))


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _scalar(raw: str, like, key):
    raw = raw.strip()
    try:
        if isinstance(like, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(like, int):
            return int(float(raw)) if "e" in raw.lower() else int(raw)
        if isinstance(like, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(like).__name__}") from exc
    return raw


def _parse(raw: str, default, key):
    if isinstance(default, tuple):
        items = [x for x in raw.split(",") if x.strip()]
        like = default[0] if default else ""
        return tuple(_scalar(x, like, key) for x in items)
    return _scalar(raw, default, key)
