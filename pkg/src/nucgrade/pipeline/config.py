"""Training configuration and its flat ``key=value`` text form.

Nested settings use dotted keys, e.g. ``network.variant=shr`` or
``loss_weights.lambda_dist=2``. Sequences are comma separated. Unknown keys
are rejected.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

from ..losses import LossWeights
from ..network import ConfigError, NetworkConfig
from ..postprocess import PostprocessParams

AUGMENTATIONS = ("flip", "rotation", "blur")
NESTED = {"network": NetworkConfig, "loss_weights": LossWeights, "postprocess": PostprocessParams}


@dataclass
class TrainConfig:
    data_dir: str = "data"
    checkpoint_dir: str = "runs"
    split: tuple[float, float, float] = (0.7, 0.1, 0.2)
    split_seed: int = 0
    epochs_frozen: int = 50
    epochs_finetune: int = 50
    lr_initial: float = 1e-4
    lr_after: float = 1e-5
    lr_drop_epoch: int = 25  # counted from the start of each phase
    batch_size: int = 4
    augmentations: tuple[str, ...] = AUGMENTATIONS
    loss_weights: LossWeights = field(default_factory=LossWeights)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    postprocess: PostprocessParams = field(default_factory=PostprocessParams)
    seed: int = 0
    deterministic: bool = True
    foreground_only_classification: bool = False
    eval_every: int = 1

    def __post_init__(self):
        self.split = tuple(float(v) for v in self.split)
        self.augmentations = tuple(self.augmentations)
        self.validate()

    def validate(self):
        if len(self.split) != 3 or min(self.split) < 0 or not math.isclose(sum(self.split), 1.0, abs_tol=1e-9):
            raise ConfigError(f"split fractions {self.split} must be three non-negative values summing to 1")
        unknown = set(self.augmentations) - set(AUGMENTATIONS)
        if unknown:
            raise ConfigError(f"unknown augmentations: {sorted(unknown)}")
        if self.batch_size < 1 or self.epochs_frozen < 0 or self.epochs_finetune < 0:
            raise ConfigError("batch_size must be >= 1 and epoch counts >= 0")
        if self.lr_initial <= 0 or self.lr_after <= 0:
            raise ConfigError("learning rates must be positive")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        self.network.validate()

    @property
    def total_epochs(self) -> int:
        return self.epochs_frozen + self.epochs_finetune

    def learning_rate(self, epoch: int) -> float:
        phase_start = 0 if epoch < self.epochs_frozen else self.epochs_frozen
        return self.lr_initial if epoch - phase_start < self.lr_drop_epoch else self.lr_after

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        for key, typ in NESTED.items():
            if key in d and isinstance(d[key], dict):
                d[key] = typ(**d[key])
        return cls(**d)

    def to_text(self) -> str:
        lines = []
        for key, value in _flatten(self).items():
            lines.append(f"{key}={_format(value)}")
        return "\n".join(lines) + "\n"


def _format(value) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    return str(value)


def _flatten(cfg: TrainConfig) -> dict:
    flat = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if f.name in NESTED:
            for sub in dataclasses.fields(value):
                flat[f"{f.name}.{sub.name}"] = getattr(value, sub.name)
        else:
            flat[f.name] = value
    return flat


def _coerce(key: str, text: str, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [t for t in (s.strip() for s in text.split(",")) if t]
            elem = default[0] if default else ""
            return tuple(_coerce(key, t, elem) for t in items)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    base = base or TrainConfig()
    flat = _flatten(base)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in flat:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        flat[key] = _coerce(key, value, flat[key])

    top, nested = {}, {k: {} for k in NESTED}
    for key, value in flat.items():
        head, _, tail = key.partition(".")
        if tail:
            nested[head][tail] = value
        else:
            top[key] = value
    try:
        for key, typ in NESTED.items():
            top[key] = typ(**nested[key])
        return TrainConfig(**top)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> TrainConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)
