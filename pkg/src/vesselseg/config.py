"""Run configuration: one JSON file holding every tunable.

Unknown keys are rejected at every level so typos fail loudly. All defaults
are the dataclass defaults of the section types; ``vesselseg <cmd> --seed``
overrides the file's seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .arch import ArchConfig
from .data import AugmentPolicy, SynthConfig
from .errors import ConfigError, DataFormatError
from .loss import LossConfig
from .train import TrainConfig


@dataclass
class TrainSection:
    lr: float = 1e-4
    lr_decay: float = 0.0
    batch_size: int = 2
    epochs: int = 50


@dataclass
class SplitSection:
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    kfolds: int = 10


@dataclass
class PathsSection:
    manifest: str | None = None
    out_dir: str | None = None


@dataclass
class RunConfig:
    seed: int = 0
    label: str | None = None
    synth: SynthConfig = field(default_factory=SynthConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainSection = field(default_factory=TrainSection)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    split: SplitSection = field(default_factory=SplitSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def train_config(self) -> TrainConfig:
        cfg = TrainConfig(arch=self.arch, loss=self.loss, lr=self.train.lr,
                          lr_decay=self.train.lr_decay,
                          batch_size=self.train.batch_size,
                          epochs=self.train.epochs, seed=self.seed,
                          augment=self.augment)
        cfg.validate()
        return cfg

    def model_label(self) -> str:
        if self.label:
            return self.label
        names = {"unet": "U-Net", "unetpp": "U-Net++", "unet3p": "U-Net3+"}
        label = names[self.arch.kind]
        if self.arch.kind == "unet3p" and not self.arch.deep_supervision:
            label += " w/o DS"
        return label


_TUPLE_FIELDS = {"ratios", "vessel_width_range", "scale_range", "crop_frac_range",
                 "noise_sigma_range", "blur_sigma_range"}


def _build_section(cls, mapping: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(mapping) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{where}': {', '.join(unknown)}")
    kwargs = {}
    for key, value in mapping.items():
        if key in _TUPLE_FIELDS and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"invalid value in '{where}': {exc}") from exc


_SECTIONS = {
    "synth": SynthConfig,
    "arch": ArchConfig,
    "loss": LossConfig,
    "train": TrainSection,
    "augment": AugmentPolicy,
    "split": SplitSection,
    "paths": PathsSection,
}


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    known_top = {"seed", "label"} | set(_SECTIONS)
    unknown = sorted(set(raw) - known_top)
    if unknown:
        raise ConfigError(f"{path}: unknown top-level key(s): {', '.join(unknown)}")
    cfg = RunConfig()
    if "seed" in raw:
        cfg.seed = int(raw["seed"])
    if "label" in raw:
        cfg.label = str(raw["label"])
    for name, cls in _SECTIONS.items():
        if name in raw:
            if not isinstance(raw[name], dict):
                raise ConfigError(f"{path}: section '{name}' must be an object")
            setattr(cfg, name, _build_section(cls, raw[name], name))
    cfg.synth.validate()
    cfg.arch.validate()
    cfg.loss.validate()
    return cfg
