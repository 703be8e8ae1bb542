"""Shared domain types, the label taxonomy and configuration handling.

Conventions used across the package:
  * images are float tensors of shape (B, 3, H, W) with values in [0, 1];
    no dataset mean/std normalization is applied anywhere (the relighting
    losses compare absolute intensities, so a common scale is required)
  * label maps are integer tensors of shape (B, H, W) with class indices
    in [0, K) or ``ignore_index`` (255, Cityscapes convention)
  * class-likelihood maps are (B, K, H, W); function names and docstrings
    state whether they expect logits or softmax probabilities
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

IGNORE_INDEX = 255

# crop sizes and the exposure pooling window share this granularity
SIZE_DIVISOR = 32


class ConfigError(ValueError):
    """A configuration value violates an invariant."""


class ShapeError(ValueError):
    """Tensor arguments have incompatible or unsupported shapes."""


class DegenerateInputError(ValueError):
    """An input is valid in shape but carries no usable signal."""


class DomainTag(Enum):
    SOURCE = "source"
    TARGET_DAY = "target_day"
    TARGET_NIGHT = "target_night"


CITYSCAPES_NAMES = (
    "road", "sidewalk", "building", "wall", "fence", "pole",
    "traffic light", "traffic sign", "vegetation", "terrain",
    "sky", "person", "rider", "car", "truck", "bus",
    "train", "motorcycle", "bicycle",
)

# categories whose pixels persist between a day image and its aligned
# night counterpart; note "building" is intentionally not included
CITYSCAPES_STATIC = frozenset({
    "road", "sidewalk", "wall", "fence", "pole", "traffic light",
    "traffic sign", "vegetation", "terrain", "sky",
})


@dataclass(frozen=True)
class LabelSet:
    """An ordered category taxonomy with a static-object designation."""

    names: tuple[str, ...]
    static_mask: tuple[bool, ...]
    ignore_index: int = IGNORE_INDEX

    def __post_init__(self):
        if len(self.names) < 2:
            raise ConfigError("label set needs at least 2 categories")
        if len(self.static_mask) != len(self.names):
            raise ConfigError("static_mask length does not match names")
        if len(set(self.names)) != len(self.names):
            raise ConfigError("duplicate category names")
        if 0 <= self.ignore_index < len(self.names):
            raise ConfigError("ignore_index collides with a class index")

    @property
    def num_classes(self) -> int:
        return len(self.names)

    @property
    def static_indices(self) -> tuple[int, ...]:
        return tuple(i for i, s in enumerate(self.static_mask) if s)

    @property
    def static_names(self) -> tuple[str, ...]:
        return tuple(n for n, s in zip(self.names, self.static_mask) if s)

    @classmethod
    def cityscapes(cls) -> "LabelSet":
        mask = tuple(n in CITYSCAPES_STATIC for n in CITYSCAPES_NAMES)
        return cls(names=CITYSCAPES_NAMES, static_mask=mask)

    @classmethod
    def from_names(cls, names, static_names) -> "LabelSet":
        names = tuple(names)
        static = frozenset(static_names)
        unknown = static - set(names)
        if unknown:
            raise ConfigError(f"static categories not in taxonomy: {sorted(unknown)}")
        return cls(names=names, static_mask=tuple(n in static for n in names))


@dataclass
class Config:
    """Every tunable of the training system, defaulted to the published values."""

    # light loss combination weights
    alpha_tv: float = 10.0
    alpha_exp: float = 1.0
    alpha_ssim: float = 1.0
    # total generator objective weights
    beta_light: float = 0.01
    beta_seg: float = 1.0
    beta_static: float = 1.0
    beta_adv: float = 0.01
    # class re-weighting; std_test = 0 disables re-weighting at inference
    std_train: float = 0.05
    std_test: float = 0.16
    weight_avg: float = 1.0
    focal_gamma: float = 1.0
    # generator optimizer (SGD) and schedule
    base_lr: float = 2.5e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    poly_power: float = 0.9
    max_iters: int = 2000
    # discriminator optimizer (Adam), same poly schedule
    disc_lr: float = 2.5e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    # adversarial targets (least-squares labels)
    adv_real: float = 1.0
    adv_fake: float = 0.0
    # batching and augmentation
    batch_size: int = 2
    crop_source: int = 512
    scale_source: tuple[float, float] = (0.5, 1.0)
    crop_target: int = 960
    scale_target: tuple[float, float] = (0.9, 1.1)
    hflip: bool = True
    # stages
    pretrain_iters: int = 600
    save_interval: int = 0
    seed: int = 1234
    # architecture width knobs (widest stage of each net)
    relight_channels: int = 64
    seg_channels: int = 64
    # behaviour switches / ablation toggles
    light_domains: str = "all"          # "all" | "targets"
    static_modulation: str = "pseudo"   # "pseudo" | "matched"
    static_loss_kind: str = "paper"     # "paper" | "ce" | "focal" | "none"
    relight_enabled: bool = True
    light_loss_enabled: bool = True
    reweight_pseudo: bool = True


_CHOICES = {
    "light_domains": ("all", "targets"),
    "static_modulation": ("pseudo", "matched"),
    "static_loss_kind": ("paper", "ce", "focal", "none"),
}


def validate_config(cfg: Config) -> Config:
    """Check every config invariant; returns cfg unchanged if all hold.

    Raises ConfigError naming the first violated invariant.
    """
    for name in ("alpha_tv", "alpha_exp", "alpha_ssim",
                 "beta_light", "beta_seg", "beta_static", "beta_adv"):
        if getattr(cfg, name) < 0:
            raise ConfigError(f"negative loss weight: {name} = {getattr(cfg, name)}")
    if cfg.std_train <= 0:
        raise ConfigError(f"std_train must be > 0, got {cfg.std_train}")
    if cfg.std_test < 0:
        raise ConfigError(f"std_test must be >= 0, got {cfg.std_test}")
    if cfg.weight_avg <= 0:
        raise ConfigError(f"weight_avg must be > 0, got {cfg.weight_avg}")
    if cfg.focal_gamma < 0:
        raise ConfigError(f"focal_gamma must be >= 0, got {cfg.focal_gamma}")
    for name in ("base_lr", "disc_lr"):
        if getattr(cfg, name) <= 0:
            raise ConfigError(f"{name} must be > 0, got {getattr(cfg, name)}")
    if not 0 <= cfg.momentum < 1:
        raise ConfigError(f"momentum must lie in [0, 1), got {cfg.momentum}")
    if cfg.weight_decay < 0:
        raise ConfigError(f"weight_decay must be >= 0, got {cfg.weight_decay}")
    if cfg.poly_power < 0:
        raise ConfigError(f"poly_power must be >= 0, got {cfg.poly_power}")
    for name in ("adam_beta1", "adam_beta2"):
        if not 0 <= getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must lie in [0, 1), got {getattr(cfg, name)}")
    if cfg.adv_real == cfg.adv_fake:
        raise ConfigError("adv_real and adv_fake must differ")
    for name in ("max_iters", "batch_size"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be >= 1, got {getattr(cfg, name)}")
    for name in ("pretrain_iters", "save_interval"):
        if getattr(cfg, name) < 0:
            raise ConfigError(f"{name} must be >= 0, got {getattr(cfg, name)}")
    for name in ("crop_source", "crop_target"):
        crop = getattr(cfg, name)
        if crop < SIZE_DIVISOR or crop % SIZE_DIVISOR != 0:
            raise ConfigError(f"{name} = {crop}: crop not divisible by 32")
    for name in ("scale_source", "scale_target"):
        rng = getattr(cfg, name)
        if len(rng) != 2 or not (0 < rng[0] <= rng[1] <= 2):
            raise ConfigError(f"{name} = {rng}: scale range must satisfy 0 < lo <= hi <= 2")
    for name in ("relight_channels", "seg_channels"):
        ch = getattr(cfg, name)
        if ch < 8 or ch % 4 != 0:
            raise ConfigError(f"{name} must be a multiple of 4 and >= 8, got {ch}")
    for name, choices in _CHOICES.items():
        if getattr(cfg, name) not in choices:
            raise ConfigError(f"{name} must be one of {choices}, got {getattr(cfg, name)!r}")
    return cfg


def _parse_value(key: str, text: str, target_type):
    text = text.strip()
    try:
        if target_type is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if target_type is int:
            return int(text)
        if target_type is float:
            return float(text)
        if target_type is str:
            return text
        # remaining fields are float pairs written as "lo,hi"
        parts = [p for p in text.replace("(", "").replace(")", "").split(",") if p.strip()]
        if len(parts) != 2:
            raise ValueError(text)
        return (float(parts[0]), float(parts[1]))
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {text!r}") from exc


def config_from_mapping(mapping: dict) -> Config:
    """Build a Config from string key/value pairs; unknown keys are an error."""
    # field types are recovered from the defaults (every field has one)
    real_types = {f.name: type(f.default) for f in dataclasses.fields(Config)
                  if f.default is not dataclasses.MISSING}
    values = {}
    for key, raw in mapping.items():
        if key not in real_types:
            raise ConfigError(f"unknown config key: {key!r}")
        if isinstance(raw, str):
            values[key] = _parse_value(key, raw, real_types[key])
        else:
            values[key] = raw
    return Config(**values)


def load_config(path) -> Config:
    """Parse a flat ``key = value`` config file ('#' starts a comment)."""
    mapping = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key in mapping:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        mapping[key] = value.strip()
    return config_from_mapping(mapping)
