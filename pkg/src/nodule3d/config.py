"""Run configuration and the ``key=value`` config-file format.

Files are UTF-8 text, one ``key = value`` per line, ``#`` starts a comment.
Nested sections use dotted keys, e.g. ``model.base_features = 8`` or
``augment.flip_prob = 0``.  Tuples are written comma-separated.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .augment import AugmentConfig
from .errors import InvalidConfigError
from .losses import LossConfig
from .model import JointModelConfig

SECTIONS = ("model", "loss", "augment")


@dataclass
class RunConfig:
    model: JointModelConfig = field(default_factory=JointModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    task: str = "joint"  # "joint" or "recognizer"
    patch_extent: int = 32
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    hu_min: float = -1000.0
    hu_max: float = 400.0
    lr: float = 1e-4
    batch_size: int = 4
    max_steps: int = 2000
    eval_every: int = 50
    eval_on: str = "val"  # "val" or "train"
    early_stop_iou: float = 0.0  # 0 disables early stopping
    early_stop_acc: float = 0.0
    freeze_encoder: bool = False
    filter_mode: str = "volume"  # "volume" or "classifier"
    min_volume_voxels: int = 8
    seed: int = 0

    def validate(self):
        self.model.validate()
        self.loss.validate()
        self.augment.validate()
        if self.task not in ("joint", "recognizer"):
            raise InvalidConfigError(f"unknown task {self.task!r}")
        if self.patch_extent % 2 ** self.model.stages:
            raise InvalidConfigError(
                f"patch_extent {self.patch_extent} is not divisible by 2^{self.model.stages}")
        if self.batch_size < 1:
            raise InvalidConfigError("batch_size must be >= 1")
        if self.max_steps < 0 or self.eval_every < 1:
            raise InvalidConfigError("max_steps must be >= 0 and eval_every >= 1")
        if self.hu_max <= self.hu_min:
            raise InvalidConfigError("hu_max must exceed hu_min")
        if self.filter_mode not in ("volume", "classifier"):
            raise InvalidConfigError("filter_mode must be 'volume' or 'classifier'")
        if self.min_volume_voxels < 0:
            raise InvalidConfigError("min_volume_voxels must be >= 0")
        if self.eval_on not in ("val", "train"):
            raise InvalidConfigError("eval_on must be 'val' or 'train'")
        if len(self.spacing_mm) != 3 or any(s <= 0 for s in self.spacing_mm):
            raise InvalidConfigError("spacing_mm must be three positive numbers")
        return self


def _convert(raw, current, key):
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("1", "true", "yes", "on")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, (tuple, list)):
            items = [float(x) for x in raw.split(",") if x.strip()]
            return tuple(items) if isinstance(current, tuple) else items
        return raw
    except ValueError:
        raise InvalidConfigError(f"{key}: cannot parse {raw!r}") from None


def set_key(cfg, key, raw):
    target, name = cfg, key
    if "." in key:
        section, name = key.split(".", 1)
        if section not in SECTIONS or "." in name:
            raise InvalidConfigError(f"unknown config key {key!r}")
        target = getattr(cfg, section)
    if name in SECTIONS and target is cfg or not hasattr(target, name):
        raise InvalidConfigError(f"unknown config key {key!r}")
    setattr(target, name, _convert(raw.strip(), getattr(target, name), key))


def parse_config_text(text, base=None):
    cfg = base or RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfigError(f"line {lineno}: expected key=value")
        key, value = line.split("=", 1)
        set_key(cfg, key.strip(), value)
    return cfg


def load_config(path, base=None):
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read(), base)


def config_to_text(cfg):
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if f.name in SECTIONS:
            for g in dataclasses.fields(v):
                lines.append(f"{f.name}.{g.name}={_fmt(getattr(v, g.name))}")
        else:
            lines.append(f"{f.name}={_fmt(v)}")
    return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, (tuple, list)):
        return ",".join(repr(float(x)) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)
