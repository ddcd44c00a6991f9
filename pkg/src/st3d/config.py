"""JSON run configuration.

Keys are exactly the :class:`RunConfig` field names; unknown keys are
rejected so typos cannot silently fall back to defaults.  Relative paths are
resolved against the config file's directory.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .arch import NetworkSpec, named_spec
from .data import DEFAULT_SCALES, AugmentConfig, read_mean_file
from .errors import ConfigError
from .train import TrainConfig

_PATH_FIELDS = ("train_manifest", "val_manifest", "mean_file", "pretrained")


@dataclass
class RunConfig:
    # architecture
    model: str = "resnet"
    depth: int = 18
    num_classes: int = 400
    clip_len: int = 16
    width_divisor: int = 1
    shortcut_type: Optional[str] = None
    cardinality: int = 32
    growth_rate: int = 32
    widening_factor: int = 2
    # data
    train_manifest: Optional[str] = None
    val_manifest: Optional[str] = None
    mean_file: Optional[str] = None
    channel_mean: Optional[list] = None
    scales: list = dataclasses.field(default_factory=lambda: list(DEFAULT_SCALES))
    flip_prob: float = 0.5
    sample_size: int = 112
    # training
    mode: str = "scratch"
    initial_lr: Optional[float] = None
    weight_decay: Optional[float] = None
    momentum: float = 0.9
    batch_size: int = 8
    max_epochs: int = 50
    seed: int = 0
    trainable_prefixes: Optional[list] = None
    patience: int = 10
    min_delta: float = 1e-3
    target_top1: Optional[float] = None
    pretrained: Optional[str] = None
    out_dir: str = "runs"

    def validate(self, check_paths: bool = True) -> "RunConfig":
        def bad(name, why):
            raise ConfigError(f"config field {name!r}: {why}")

        if self.initial_lr is not None and not self.initial_lr > 0:
            bad("initial_lr", f"must be > 0, got {self.initial_lr}")
        if self.weight_decay is not None and not self.weight_decay >= 0:
            bad("weight_decay", f"must be >= 0, got {self.weight_decay}")
        if not 0 < self.flip_prob < 1:
            bad("flip_prob", f"must lie strictly between 0 and 1, got {self.flip_prob}")
        if not 0 <= self.momentum < 1:
            bad("momentum", f"must lie in [0, 1), got {self.momentum}")
        if self.mode not in ("scratch", "finetune"):
            bad("mode", f"must be 'scratch' or 'finetune', got {self.mode!r}")
        for name in ("num_classes", "clip_len", "sample_size", "batch_size", "width_divisor", "patience"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                bad(name, f"must be a positive integer, got {getattr(self, name)!r}")
        if self.channel_mean is not None and len(self.channel_mean) != 3:
            bad("channel_mean", "needs three values (R, G, B)")
        if check_paths:
            for name in _PATH_FIELDS:
                value = getattr(self, name)
                if value is not None and not Path(value).exists():
                    bad(name, f"path {value} does not exist")
        return self

    def network_spec(self) -> NetworkSpec:
        return named_spec(self.model, self.depth, self.num_classes, self.clip_len,
                          self.width_divisor, self.shortcut_type, self.cardinality,
                          self.growth_rate, self.widening_factor)

    def resolve_mean(self) -> tuple:
        if self.channel_mean is not None:
            return tuple(float(m) for m in self.channel_mean)
        if self.mean_file is not None:
            return read_mean_file(self.mean_file)
        return (0.0, 0.0, 0.0)

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(scales=tuple(self.scales), clip_len=self.clip_len,
                             out_size=self.sample_size, flip_prob=self.flip_prob,
                             channel_mean=self.resolve_mean())

    def train_config(self) -> TrainConfig:
        return TrainConfig(mode=self.mode, initial_lr=self.initial_lr, weight_decay=self.weight_decay,
                           momentum=self.momentum, batch_size=self.batch_size,
                           max_epochs=self.max_epochs, seed=self.seed,
                           trainable_prefixes=self.trainable_prefixes, patience=self.patience,
                           min_delta=self.min_delta, target_top1=self.target_top1)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def config_from_dict(raw: dict, base_dir=None, check_paths: bool = True) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    raw = dict(raw)
    if base_dir is not None:
        for name in _PATH_FIELDS + ("out_dir",):
            if raw.get(name) is not None and not Path(raw[name]).is_absolute():
                raw[name] = str(Path(base_dir) / raw[name])
    return RunConfig(**raw).validate(check_paths)


def load_run_config(path, check_paths: bool = True) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    return config_from_dict(raw, path.parent, check_paths)
