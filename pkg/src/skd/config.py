"""Flat run configuration: ``key = value`` files merged with command-line overrides."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path

from skd.data import SyntheticConfig
from skd.errors import ConfigError
from skd.losses import LossWeights
from skd.model import BackboneConfig
from skd.train import AugmentConfig, SgdConfig

_SYN, _SGD, _LOSS, _AUG, _BB = SyntheticConfig(), SgdConfig(), LossWeights(), AugmentConfig(), BackboneConfig()


@dataclass(frozen=True)
class RunConfig:
    # paths
    data: str = "data.fsds"
    split: str = ""            # default: <data stem>.split.json
    out: str = ""              # per-subcommand default
    teacher: str = ""
    checkpoint: str = ""
    log: str = ""              # default: <out stem>.jsonl
    checkpoint_dir: str = ""
    seed: int = 0              # data seed for gen-data, training seed otherwise
    # synthetic data
    num_classes: int = _SYN.num_classes
    samples_per_class: int = _SYN.samples_per_class
    image_size: int = _SYN.image_size
    noise_std: float = _SYN.noise_std
    orientation_spread: float = _SYN.orientation_spread
    illumination: float = _SYN.illumination
    n_train: int = 20
    n_val: int = 4
    n_test: int = 8
    # backbone
    block_filters: str = ",".join(map(str, _BB.block_filters))
    input_mean: float = _BB.input_mean
    input_std: float = _BB.input_std
    # optimizer
    lr: float = _SGD.lr
    momentum: float = _SGD.momentum
    weight_decay: float = _SGD.weight_decay
    lr_drop_epoch: int = _SGD.lr_drop_epoch
    lr_drop_factor: float = _SGD.lr_drop_factor
    epochs: int = _SGD.epochs
    batch_size: int = _SGD.batch_size
    max_grad_norm: float = _SGD.max_grad_norm
    gen1_epochs: int = 0       # 0: Gen-1 reuses the Gen-0 schedule
    # losses
    alpha: float = _LOSS.alpha
    beta: float = _LOSS.beta
    temperature: float = _LOSS.temperature
    kd_direction: str = _LOSS.kd_direction
    kd_t2_scaling: bool = _LOSS.kd_t2_scaling
    pretext: str = "rotation"
    twin_rotation: int = 180
    # augmentation
    flip_prob: float = _AUG.flip_prob
    crop_pad: int = _AUG.crop_pad
    # evaluation
    n_way: int = 5
    k_shot: int = 1
    q_size: int = 15
    num_tasks: int = 600
    eval_seed: int = 0
    eval_split: str = "test"
    l2_reg: float = 1.0
    max_iters: int = 1000
    # ablation
    grid: str = ""
    alpha_grid: str = ""
    beta_grid: str = ""
    seeds: str = "0"

    # -- conversions -------------------------------------------------------

    def synthetic(self) -> SyntheticConfig:
        return SyntheticConfig(num_classes=self.num_classes, samples_per_class=self.samples_per_class,
                               image_size=self.image_size, noise_std=self.noise_std, seed=self.seed,
                               orientation_spread=self.orientation_spread, illumination=self.illumination)

    def backbone(self, num_classes: int, channels: int, size: int) -> BackboneConfig:
        return BackboneConfig(block_filters=parse_int_list(self.block_filters, "block_filters"),
                              input_channels=channels, input_size=size, num_classes=num_classes,
                              input_mean=self.input_mean, input_std=self.input_std)

    def sgd(self, seed: int | None = None) -> SgdConfig:
        return SgdConfig(lr=self.lr, momentum=self.momentum, weight_decay=self.weight_decay,
                         lr_drop_epoch=self.lr_drop_epoch, lr_drop_factor=self.lr_drop_factor, epochs=self.epochs,
                         batch_size=self.batch_size, seed=self.seed if seed is None else seed,
                         max_grad_norm=self.max_grad_norm)

    def gen1_sgd(self, seed: int | None = None) -> SgdConfig:
        """Gen-1 schedule; a shorter budget keeps the lr drop at the same fraction of training."""
        base = self.sgd(seed)
        if self.gen1_epochs <= 0 or self.gen1_epochs == self.epochs:
            return base
        drop = round(self.lr_drop_epoch * self.gen1_epochs / max(self.epochs, 1))
        return dataclasses.replace(base, epochs=self.gen1_epochs, lr_drop_epoch=drop)

    def loss(self, **overrides) -> LossWeights:
        base = dict(alpha=self.alpha, beta=self.beta, temperature=self.temperature,
                    kd_direction=self.kd_direction, kd_t2_scaling=self.kd_t2_scaling)
        return LossWeights(**{**base, **overrides})

    def augment(self) -> AugmentConfig:
        return AugmentConfig(flip_prob=self.flip_prob, crop_pad=self.crop_pad)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_int_list(text: str, key: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{key} must be a comma-separated list of integers, got {text!r}") from None


def parse_float_list(text: str, key: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{key} must be a comma-separated list of numbers, got {text!r}") from None


def coerce(key: str, raw: str):
    """Convert a textual value to the declared type of ``key``."""
    if key not in FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            value = float(raw)
            if not math.isfinite(value):
                raise ValueError(raw)
            return value
    except ValueError:
        raise ConfigError(f"config key {key!r} expects {kind}, got {raw!r}") from None
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key = key.strip()
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = coerce(key, value)
    return values


def load_config_file(path) -> dict:
    return parse_config_text(Path(path).read_text(encoding="utf-8"), str(path))


def resolve(file_values: dict, overrides: dict) -> RunConfig:
    """File values first, then overrides (already typed or textual); unknown keys raise."""
    merged = dict(file_values)
    for key, value in overrides.items():
        if key not in FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        merged[key] = coerce(key, value) if isinstance(value, str) else value
    return RunConfig(**merged)


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())
