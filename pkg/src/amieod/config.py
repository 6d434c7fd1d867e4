"""Run configuration: typed sections, TOML loading, dotted-key overrides.

One section per subsystem. Paper-scale hyperparameters are available through
``TrainConfig.stage1_defaults()`` / ``stage2_defaults()``; the plain
``RunConfig()`` carries desk-scale values that train in minutes on a CPU.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .detector import DetectorConfig


@dataclass
class TrainConfig:
    stage: int
    lr: float
    epochs: int
    batch_size: int
    momentum: float = 0.937
    weight_decay: float = 0.0005
    alpha: float = 0.2
    input_size: int = 640
    seed: int = 0
    lr_schedule: str = "constant"  # or "cosine"
    # desk-scale stand-in for starting from a detector pretrained on
    # well-lit data; applies to stage 1 only and needs bright references
    detector_pretrain_steps: int = 0
    detector_pretrain_lr: float = 0.01

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("need lr > 0, epochs >= 1, batch_size >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha outside [0,1]: {self.alpha}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule: {self.lr_schedule}")

    @classmethod
    def stage1_defaults(cls) -> "TrainConfig":
        return cls(stage=1, lr=0.01, epochs=100, batch_size=8)

    @classmethod
    def stage2_defaults(cls) -> "TrainConfig":
        return cls(stage=2, lr=0.001, epochs=30, batch_size=1)


@dataclass
class DataConfig:
    root: str = "data/synth"
    format: str = "yolo-txt"
    class_names: tuple[str, ...] = ("circle", "rectangle", "triangle")
    hflip: bool = True
    darken_jitter: bool = False


@dataclass
class SynthSection:
    num_train: int = 200
    num_test: int = 50
    canvas_size: int = 128
    shapes_per_image: int = 2
    shape_size_range: tuple[float, float] = (0.16, 0.36)
    gamma_range: tuple[float, float] = (2.0, 4.0)
    gain_range: tuple[float, float] = (0.15, 0.5)
    noise_sigma: float = 0.02


@dataclass
class EnhanceConfig:
    curve_width: int = 16
    pp_input_size: int = 256
    piem_pretrain_steps: int = 300
    piem_pretrain_lr: float = 0.01


@dataclass
class EsmConfig:
    input_size: int = 224
    width: int = 16
    blocks_per_stage: tuple[int, ...] = (1, 1, 1, 1)
    deep: bool = False
    pseudo_label_cache: bool = False


@dataclass
class EvalConfig:
    conf_thresh: float = 0.25
    nms_thresh: float = 0.5
    decode_thresh: float = 0.05
    iou_thresh: float = 0.5


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthSection = field(default_factory=SynthSection)
    detector: DetectorConfig = field(default_factory=lambda: DetectorConfig(num_classes=3))
    enhance: EnhanceConfig = field(default_factory=EnhanceConfig)
    esm: EsmConfig = field(default_factory=EsmConfig)
    stage1: TrainConfig = field(default_factory=lambda: TrainConfig(
        stage=1, lr=0.01, epochs=20, batch_size=8, input_size=128))
    stage2: TrainConfig = field(default_factory=lambda: TrainConfig(
        stage=2, lr=0.001, epochs=10, batch_size=1, input_size=128))
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))


_SECTIONS = {
    "data": DataConfig,
    "synth": SynthSection,
    "detector": DetectorConfig,
    "enhance": EnhanceConfig,
    "esm": EsmConfig,
    "stage1": TrainConfig,
    "stage2": TrainConfig,
    "eval": EvalConfig,
}

# fields that must arrive as tuples (possibly nested) rather than lists
_TUPLE_FIELDS = {
    "anchors": 2,
    "loss_weights": 1,
    "class_names": 1,
    "gamma_range": 1,
    "gain_range": 1,
    "shape_size_range": 1,
    "blocks_per_stage": 1,
}


def _coerce(name: str, value: Any) -> Any:
    depth = _TUPLE_FIELDS.get(name)
    if depth == 1 and isinstance(value, (list, tuple)):
        return tuple(value)
    if depth == 2 and isinstance(value, (list, tuple)):
        return tuple(tuple(v) for v in value)
    return value


def _build_section(cls, name: str, raw: dict) -> Any:
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown key(s) in [{name}]: {sorted(unknown)}")
    kwargs = {k: _coerce(k, v) for k, v in raw.items()}
    if cls is TrainConfig:
        kwargs.setdefault("stage", 1 if name == "stage1" else 2)
    return cls(**kwargs)


def config_from_dict(doc: dict) -> RunConfig:
    cfg = RunConfig()
    for key, value in doc.items():
        if key == "seed":
            cfg.seed = int(value)
            continue
        if key not in _SECTIONS:
            raise ValueError(f"unknown config section: [{key}]")
        if not isinstance(value, dict):
            raise ValueError(f"section [{key}] must be a table")
        base = dataclasses.asdict(getattr(cfg, key))
        base.update(value)
        setattr(cfg, key, _build_section(_SECTIONS[key], key, base))
    cfg.stage1.seed = cfg.seed
    cfg.stage2.seed = cfg.seed
    return cfg


def load_config(path: Path) -> RunConfig:
    with open(path, "rb") as fh:
        return config_from_dict(tomllib.load(fh))


def _parse_override_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` (or ``seed=N``) overrides in order."""
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override must look like section.key=value: {item!r}")
        dotted, text = item.split("=", 1)
        value = _parse_override_value(text)
        parts = dotted.strip().split(".")
        if parts == ["seed"]:
            cfg.seed = int(value)
            cfg.stage1.seed = cfg.seed
            cfg.stage2.seed = cfg.seed
            continue
        if len(parts) != 2 or parts[0] not in _SECTIONS:
            raise ValueError(f"unknown config key: {dotted!r}")
        section, key = parts
        current = getattr(cfg, section)
        if key not in {f.name for f in fields(type(current))}:
            raise ValueError(f"unknown config key: {dotted!r}")
        raw = dataclasses.asdict(current)
        raw[key] = value
        setattr(cfg, section, _build_section(_SECTIONS[section], section, raw))
    return cfg
