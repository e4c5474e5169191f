"""Run configuration: dataclasses, YAML loading, validation."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class ConfigError(ValueError):
    """Raised for invalid or unknown configuration values."""


@dataclass
class AugmentConfig:
    """Preprocessing knobs: fixed resize, crop, flip, color jitter, normalize."""

    resize_side: int = 550
    crop_side: int = 448
    hflip_prob: float = 0.5
    # max relative deltas for (brightness, contrast, saturation)
    color_jitter: tuple[float, float, float] = (0.2, 0.2, 0.2)
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD
    # fixed-size resize distorts aspect ratio; set True for shorter-side resize
    keep_aspect: bool = False

    def validate(self) -> None:
        if self.crop_side > self.resize_side:
            raise ConfigError(
                f"crop_side {self.crop_side} exceeds resize_side {self.resize_side}"
            )
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ConfigError(f"hflip_prob {self.hflip_prob} not in [0, 1]")
        if any(d < 0 for d in self.color_jitter):
            raise ConfigError(f"negative color_jitter delta in {self.color_jitter}")


@dataclass
class AttentionConfig:
    """Cross-stage self-attention over pooled spatial tokens."""

    token_grid: int = 7  # tokens per stage = token_grid ** 2
    attn_dim: int = 64
    residual: bool = True

    def validate(self) -> None:
        if self.token_grid < 1:
            raise ConfigError(f"token_grid must be >= 1, got {self.token_grid}")
        if self.attn_dim < 1:
            raise ConfigError(f"attn_dim must be >= 1, got {self.attn_dim}")


@dataclass
class RunConfig:
    """Everything a training or evaluation run needs, flat for easy override."""

    data_root: str = ""
    out_dir: str = "runs/default"

    # model
    backbone: str = "tiny3"
    num_stages: int = 3  # U
    neck_dim: int = 16  # common width D of the stage necks
    token_grid: int = 7
    attn_dim: int = 64
    attn_residual: bool = True

    # optimization
    epochs: int = 30
    batch_size: int = 16
    base_lr: float = 1e-3
    lr_decay: float = 0.9  # applied every lr_decay_epochs
    lr_decay_epochs: int = 2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    steps: int = 3  # S progressive steps; total passes per batch = S + 1
    alpha: float = 0.8
    beta: float = 0.2
    seed: int = 0

    # loss variants
    kl_literal_sign: bool = False  # add (not subtract) the KL term
    kl_symmetric: bool = False
    progressive_mode: str = "batch"  # "batch" (default) or "epoch"

    # preprocessing
    resize_side: int = 550
    crop_side: int = 448
    hflip_prob: float = 0.5
    jitter_brightness: float = 0.2
    jitter_contrast: float = 0.2
    jitter_saturation: float = 0.2
    keep_aspect: bool = False

    # inference
    combine_mode: str = "prob"  # "prob" or "logit" score combination

    def validate(self) -> None:
        if self.steps > self.num_stages:
            raise ConfigError(
                f"steps ({self.steps}) must not exceed num_stages ({self.num_stages})"
            )
        if self.steps < 1 or self.num_stages < 1:
            raise ConfigError("steps and num_stages must be >= 1")
        for name in ("base_lr", "lr_decay"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if self.momentum < 0:
            raise ConfigError("momentum must be >= 0")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be nonnegative")
        if self.alpha == 0 and self.beta == 0:
            raise ConfigError("alpha and beta cannot both be zero")
        if self.progressive_mode not in ("batch", "epoch"):
            raise ConfigError(f"unknown progressive_mode {self.progressive_mode!r}")
        if self.combine_mode not in ("prob", "logit"):
            raise ConfigError(f"unknown combine_mode {self.combine_mode!r}")
        self.augment_config().validate()
        self.attention_config().validate()

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(
            resize_side=self.resize_side,
            crop_side=self.crop_side,
            hflip_prob=self.hflip_prob,
            color_jitter=(
                self.jitter_brightness,
                self.jitter_contrast,
                self.jitter_saturation,
            ),
            keep_aspect=self.keep_aspect,
        )

    def eval_config(self) -> AugmentConfig:
        cfg = self.augment_config()
        cfg.hflip_prob = 0.0
        cfg.color_jitter = (0.0, 0.0, 0.0)
        return cfg

    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(
            token_grid=self.token_grid,
            attn_dim=self.attn_dim,
            residual=self.attn_residual,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        for key in values:
            if key not in known:
                raise ConfigError(f"unknown config key: {key!r}")
        cfg = cls(**values)
        cfg.validate()
        return cfg


def load_run_config(path: str | Path, overrides: dict | None = None) -> RunConfig:
    """Load a YAML run config, apply overrides, validate."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        values = yaml.safe_load(fh) or {}
    if not isinstance(values, dict):
        raise ConfigError(f"config file {path} must contain a mapping")
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_dict(values)


def save_run_config(cfg: RunConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
