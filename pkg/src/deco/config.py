"""Run configuration: dataclasses, YAML loading, validation.

Config files are YAML with nested sections (model / loss / train / data);
keys are addressed in dotted form, e.g. ``model.hidden_dim``.  Flat files
using dotted keys directly are accepted too.  The environment variable
``DECO_SEED`` overrides ``train.seed``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, asdict, fields

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    hidden_dim: int = 64
    num_classes: int = 3
    num_queries: int = 25
    query_shape: tuple = (5, 5)  # (w, h)
    decoder_layers: int = 3
    sim_kernel: int = 9
    cim_kernel: int = 9
    sim_blocks: int = 1
    fusion_mode: str = "add"
    upsample_mode: str = "bilinear"
    cim_fixed_size: tuple | None = None
    aux_loss: bool = True
    backbone_channels: tuple = (12, 24, 48, 64, 96)
    stage_blocks: tuple = (1, 2, 1)
    stage_dims: tuple = (64, 96, 128)
    block_kernel: int = 7


@dataclass
class LossConfig:
    class_weight: float = 1.0
    l1_weight: float = 5.0
    giou_weight: float = 2.0
    no_object_weight: float = 0.1
    aux: bool = True


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 20
    batch_size: int = 8
    lr: float = 2e-4
    lr_backbone: float = 2e-4
    weight_decay: float = 1e-4
    lr_drop_epoch: int = 16
    eval_every: int = 1
    target_ap50: float | None = None
    overfit_steps: int = 0


@dataclass
class DataConfig:
    seed: int = 0
    count: int = 5000
    holdout: int = 500
    image_size: int = 128
    objects_min: int = 0
    objects_max: int = 4
    size_min: int = 10
    size_max: int = 40
    overlap_max: float = 0.3
    noise: float = 0.08
    flip_augment: bool = True
    norm_mean: tuple = (0.5, 0.5, 0.5)
    norm_std: tuple = (0.5, 0.5, 0.5)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> "RunConfig":
        m, t, d = self.model, self.train, self.data
        w, h = m.query_shape
        if w * h != m.num_queries:
            raise ConfigError(
                f"model.query_shape {w}x{h} does not factor model.num_queries={m.num_queries}")
        if m.fusion_mode not in ("add", "multiply", "concat_conv"):
            raise ConfigError(f"model.fusion_mode '{m.fusion_mode}' unknown")
        if m.upsample_mode not in ("bilinear", "nearest"):
            raise ConfigError(f"model.upsample_mode '{m.upsample_mode}' unknown")
        for name, k in (("sim_kernel", m.sim_kernel), ("cim_kernel", m.cim_kernel),
                        ("block_kernel", m.block_kernel)):
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"model.{name} must be odd and positive, got {k}")
        if m.decoder_layers < 1:
            raise ConfigError("model.decoder_layers must be >= 1")
        if len(m.backbone_channels) != 5:
            raise ConfigError("model.backbone_channels must list 5 stages")
        if len(m.stage_blocks) != 3 or len(m.stage_dims) != 3:
            raise ConfigError("model.stage_blocks / model.stage_dims must list 3 stages")
        if t.lr_drop_epoch > t.epochs:
            raise ConfigError(f"train.lr_drop_epoch={t.lr_drop_epoch} exceeds train.epochs={t.epochs}")
        if t.batch_size < 1 or t.epochs < 1:
            raise ConfigError("train.batch_size and train.epochs must be >= 1")
        if d.objects_min < 0 or d.objects_max < d.objects_min:
            raise ConfigError("data.objects_min/objects_max out of order")
        if d.objects_max > m.num_queries:
            raise ConfigError(
                f"data.objects_max={d.objects_max} exceeds model.num_queries={m.num_queries}")
        if d.holdout >= d.count:
            raise ConfigError("data.holdout must be smaller than data.count")
        if d.size_min < 4:
            raise ConfigError("data.size_min must be at least 4 pixels")
        if d.image_size < 32:
            raise ConfigError("data.image_size must be at least 32")
        return self


_SECTIONS = {"model": ModelConfig, "loss": LossConfig, "train": TrainConfig, "data": DataConfig}
_TUPLE_FIELDS = {"query_shape", "cim_fixed_size", "backbone_channels", "stage_blocks",
                 "stage_dims", "norm_mean", "norm_std"}


def _coerce(cls, values: dict):
    known = {f.name for f in fields(cls)}
    out = {}
    for k, v in values.items():
        if k not in known:
            raise ConfigError(f"unknown config key '{k}' for section {cls.__name__}")
        if k in _TUPLE_FIELDS and v is not None:
            v = tuple(v)
        out[k] = v
    return cls(**out)


def config_from_dict(raw: dict) -> RunConfig:
    """Build a RunConfig from nested sections or flat dotted keys."""
    sections = {name: {} for name in _SECTIONS}
    for key, value in (raw or {}).items():
        if key in _SECTIONS and isinstance(value, dict):
            sections[key].update(value)
        elif "." in key:
            sec, sub = key.split(".", 1)
            if sec not in _SECTIONS:
                raise ConfigError(f"unknown config section '{sec}' in key '{key}'")
            sections[sec][sub] = value
        else:
            raise ConfigError(f"unknown top-level config key '{key}'")
    cfg = RunConfig(**{name: _coerce(cls, sections[name]) for name, cls in _SECTIONS.items()})
    seed_override = os.environ.get("DECO_SEED")
    if seed_override is not None:
        try:
            cfg.train.seed = int(seed_override)
        except ValueError as e:
            raise ConfigError(f"DECO_SEED must be an integer, got '{seed_override}'") from e
    return cfg.validate()


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a mapping")
    return config_from_dict(raw)


def config_to_yaml(cfg: RunConfig) -> str:
    d = asdict(cfg)

    def tuples_to_lists(obj):
        if isinstance(obj, dict):
            return {k: tuples_to_lists(v) for k, v in obj.items()}
        if isinstance(obj, tuple):
            return list(obj)
        return obj

    return yaml.safe_dump(tuples_to_lists(d), sort_keys=True)
