"""
Training configuration.

Config files are plain `key = value` lines read line by line; `#` starts
a comment. Tuples are comma lists.
Command-line `--override key=value` entries are applied after the file.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path

from .arh_norm import NORM_KINDS
from .errors import UsageError, VolumeIOError
from .losses import HINGE_CONVENTIONS, REDUCTIONS, LossWeights
from .networks import DiscriminatorConfig, GeneratorConfig

logger = logging.getLogger(__name__)

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass
class TrainConfig:
    # optimization
    lr_g: float = 1e-4
    lr_d: float = 5e-5
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 1e-2
    eps: float = 1e-8
    batch_size: int = 4
    epochs: int = 10
    iterations: int = 0
    seed: int = 0
    # data
    patch_size: int = 16
    perturb_range: float = 0.3
    boundary_radius: int = 2
    max_lesion_voxels: int = 0
    threads: int = 1
    data_dir: str = "data/train"
    probe_dir: str = ""
    probe_count: int = 4
    # losses
    w_rec: float = 100.0
    w_btv: float = 10.0
    w_adv: float = 1.0
    loss_reduction: str = "mean"
    hinge_convention: str = "inverted"
    # networks
    norm_kind: str = "arh"
    levels: int = 3
    base_channels: int = 16
    mask_input: bool = True
    literal_sigma: bool = False
    norm_eps: float = 1e-5
    d_layers: int = 4
    d_base_channels: int = 16
    # outputs
    out_dir: str = "runs/arhnet"
    checkpoint_every: int = 100
    probe_every: int = 50
    log_every: int = 10

    def validate(self):
        problems = []
        if self.lr_g <= 0 or self.lr_d <= 0:
            problems.append("learning rates must be > 0")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            problems.append(f"betas must be two values in [0, 1), got {self.betas}")
        if self.eps <= 0 or self.weight_decay < 0:
            problems.append("eps must be > 0 and weight_decay >= 0")
        if min(self.w_rec, self.w_btv, self.w_adv) < 0:
            problems.append("loss weights must be >= 0")
        if self.batch_size < 1 or self.epochs < 0 or self.iterations < 0:
            problems.append("batch_size must be >= 1, epochs and iterations >= 0")
        if self.epochs == 0 and self.iterations == 0:
            problems.append("set epochs or iterations")
        if self.levels < 1 or self.base_channels < 1 or self.d_layers < 1 or self.d_base_channels < 1:
            problems.append("network sizes must be >= 1")
        if self.patch_size < 1 or self.patch_size % 2 ** (self.levels - 1):
            problems.append(f"patch_size {self.patch_size} must be divisible by 2^(levels-1) = {2 ** (self.levels - 1)}")
        if not 0 <= self.perturb_range <= 1:
            problems.append("perturb_range must lie in [0, 1]")
        if self.boundary_radius < 1:
            problems.append("boundary_radius must be >= 1")
        if self.threads < 1 or self.checkpoint_every < 1 or self.probe_every < 1 or self.log_every < 1:
            problems.append("threads and cadences must be >= 1")
        if self.norm_kind not in NORM_KINDS:
            problems.append(f"norm_kind must be one of {NORM_KINDS}")
        if self.loss_reduction not in REDUCTIONS:
            problems.append(f"loss_reduction must be one of {REDUCTIONS}")
        if self.hinge_convention not in HINGE_CONVENTIONS:
            problems.append(f"hinge_convention must be one of {HINGE_CONVENTIONS}")
        if problems:
            raise UsageError("invalid training config: " + "; ".join(problems))
        return self

    def generator_config(self):
        return GeneratorConfig(
            levels=self.levels,
            base_channels=self.base_channels,
            norm_kind=self.norm_kind,
            mask_input=self.mask_input,
            literal_sigma=self.literal_sigma,
            norm_eps=self.norm_eps,
        )

    def discriminator_config(self):
        return DiscriminatorConfig(layers=self.d_layers, base_channels=self.d_base_channels)

    def loss_weights(self):
        return LossWeights(self.w_rec, self.w_btv, self.w_adv)

    def to_dict(self):
        return {f.name: (list(v) if isinstance(v, tuple) else v)
                for f, v in ((f, getattr(self, f.name)) for f in dataclasses.fields(self))}

    @classmethod
    def from_dict(cls, values):
        config = cls()
        for key, value in values.items():
            set_value(config, key, value)
        return config


def _coerce(key, raw, default):
    if not isinstance(raw, str):
        return tuple(raw) if isinstance(default, tuple) else type(default)(raw)
    text = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered not in _TRUE | _FALSE:
                raise ValueError(text)
            return lowered in _TRUE
        if isinstance(default, tuple):
            return tuple(float(part) for part in text.split(",") if part.strip())
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise UsageError(f"config key '{key}': cannot read '{text}' as {type(default).__name__}") from None
    return text


def set_value(config, key, raw):
    key = key.strip()
    names = {f.name for f in dataclasses.fields(config)}
    if key not in names:
        raise UsageError(f"unknown config key '{key}'")
    setattr(config, key, _coerce(key, raw, getattr(TrainConfig, key)))


def parse_lines(lines, config=None, source="<config>"):
    config = config or TrainConfig()
    for number, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{number}: expected 'key = value', got '{line}'")
        key, value = line.split("=", 1)
        set_value(config, key, value)
    return config


def apply_overrides(config, overrides):
    for item in overrides or ():
        if "=" not in item:
            raise UsageError(f"override '{item}' must look like key=value")
        key, value = item.split("=", 1)
        set_value(config, key, value)
    return config


def load_config(path=None, overrides=None):
    config = TrainConfig()
    if path:
        try:
            with open(path, 'r', encoding='utf-8') as f:
                parse_lines(f, config, str(path))
        except OSError as exc:
            raise VolumeIOError(f"cannot read config: {exc.strerror or exc}", Path(path)) from exc
        logger.info(f"📄 Config loaded from {path}")
    apply_overrides(config, overrides)
    return config.validate()
