"""Experiment configuration.

Configs are JSON documents with a ``schema_version`` field. Unknown keys are
rejected. Defaults carry the published hyperparameters; ``desk_profile``
returns the reduced sizes used for single-core runs.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    num_classes: int = 12
    num_predicates: int = 11
    feature_dim: int = 256
    point_hidden: tuple[int, int] = (64, 128)
    box_embed_dim: int = 64
    encoder_gcn_layers: int = 4
    decoder_gcn_layers: int = 3
    angle_bins: int = 24
    shape_code_dim: int = 1024
    codec_seed: int = 0
    codec_hidden: tuple[int, int] = (64, 128)
    codec_decode_points: int = 256
    points_per_object: int = 1000
    points_per_pair: int = 1000
    codec_points: int = 1000


@dataclass
class LossConfig:
    eta: tuple[float, float, float] = (0.4, 0.2, 0.4)  # bbox, angle, shape
    lam: tuple[float, float] = (0.1, 1.0)  # obj, pred
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 4
    pretrain_epochs: int = 35
    finetune_epochs: int = 20
    plateau_patience: int = 5
    plateau_factor: float = 0.5
    label_fraction: float = 1.0
    reinit_heads: bool = False
    select_best: bool = True  # restore the fine-tuning epoch with the lowest held-out loss


@dataclass
class AblationFlags:
    no_gcn: bool = False
    no_skip: bool = False
    shape_loss_only: bool = False
    box_loss_only: bool = False
    no_pretrain: bool = False

    def __post_init__(self):
        if self.shape_loss_only and self.box_loss_only:
            raise ConfigError("shape_loss_only and box_loss_only are mutually exclusive")


@dataclass
class DataConfig:
    num_scenes: int = 100
    split: tuple[float, float, float] = (0.70, 0.15, 0.15)
    min_objects: int = 4
    max_objects: int = 9
    num_classes: int = 12
    num_predicates: int = 11
    scene_dir: str | None = None
    with_labels: bool = True


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    output_dir: str = "runs"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation: AblationFlags = field(default_factory=AblationFlags)

    def validate(self) -> "ExperimentConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        d, m, t = self.data, self.model, self.train
        if abs(sum(d.split) - 1.0) > 1e-9 or min(d.split) < 0:
            raise ConfigError("data.split must be three non-negative fractions summing to 1")
        if not 1 <= d.min_objects <= d.max_objects:
            raise ConfigError("data object-count range is invalid")
        if d.num_classes != m.num_classes or d.num_predicates != m.num_predicates:
            raise ConfigError("data and model vocabulary sizes disagree")
        if not 0 < t.label_fraction <= 1:
            raise ConfigError(f"label_fraction must lie in (0, 1], got {t.label_fraction}")
        if t.learning_rate <= 0 or t.batch_size < 1:
            raise ConfigError("learning_rate and batch_size must be positive")
        if not 0 < t.plateau_factor < 1:
            raise ConfigError("plateau_factor must lie in (0, 1)")
        for name in ("feature_dim", "angle_bins", "shape_code_dim", "points_per_object",
                     "points_per_pair", "codec_points"):
            if getattr(m, name) < 1:
                raise ConfigError(f"model.{name} must be positive")
        AblationFlags(**dataclasses.asdict(self.ablation))
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        ftype = fields[name].type
        sub = _SECTIONS.get(name) if cls is ExperimentConfig else None
        if sub is not None:
            kwargs[name] = _build(sub, value, f"{where}.{name}")
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
        if "bool" in str(ftype) and not isinstance(kwargs[name], bool):
            raise ConfigError(f"{where}.{name}: expected a boolean")
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from None


_SECTIONS = {"data": DataConfig, "model": ModelConfig, "loss": LossConfig,
             "train": TrainConfig, "ablation": AblationFlags}


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "config").validate()


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return config_from_dict(data)


def desk_profile(cfg: ExperimentConfig | None = None) -> ExperimentConfig:
    """Reduced widths and point counts for single-core experiments."""
    cfg = cfg or ExperimentConfig()
    m = cfg.model
    m.feature_dim = 128
    m.point_hidden = (32, 64)
    m.box_embed_dim = 32
    m.shape_code_dim = 128
    m.codec_hidden = (32, 64)
    m.points_per_object = 48
    m.points_per_pair = 64
    m.codec_points = 256
    cfg.train.learning_rate = 1e-3
    return cfg
