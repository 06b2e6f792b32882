"""Experiment configuration and the flat ``key = value`` config file format.

Keys are dotted paths into :class:`ExperimentConfig`, e.g.::

    # comments start with '#'
    dataset_root = runs/phantoms
    model.base_width = 8
    model.input_size = 32
    optimizer.lr = 0.0002
    loss_weights = 1.0, 1.0
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .phantoms import PhantomSpec
from .preprocess import AugmentationSpec


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 0.0002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class ExperimentConfig:
    dataset_root: str = "data"
    output_dir: str = "runs"
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 4
    epochs: int = 100
    loss_weights: tuple[float, float] = (1.0, 1.0)
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec)
    augment: bool = True
    box_jitter: float = 0.0
    pad_fraction: float = 0.10
    seed: int = 0
    threshold: float = 0.5
    threads: int = 1
    phantom: PhantomSpec = field(default_factory=PhantomSpec)

    def validate(self) -> None:
        self.model.validate()
        if not self.optimizer.lr > 0:
            raise ConfigError("optimizer.lr must be > 0")
        if self.optimizer.kind != "adam":
            raise ConfigError(f"unsupported optimizer kind {self.optimizer.kind!r}")
        if self.batch_size < 1 or self.epochs < 1 or self.threads < 1:
            raise ConfigError("batch_size, epochs and threads must be >= 1")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must lie in (0, 1)")
        if self.pad_fraction < 0 or not 0 <= self.box_jitter < 1:
            raise ConfigError("pad_fraction must be >= 0 and box_jitter in [0, 1)")
        self.phantom.validate()


KEY_HELP = {
    "dataset_root": "dataset directory (images/, masks/, manifest.csv)",
    "output_dir": "directory for checkpoints, logs and reports",
    "model.in_channels": "input channels (grayscale = 1)",
    "model.num_classes": "output classes (background + nodule = 2)",
    "model.base_width": "channels of the first stage; doubles per depth",
    "model.depth": "down-samplings (fixed at 4)",
    "model.web_ratio": "weight-excitation bottleneck ratio",
    "model.input_size": "ROI side length fed to the network (multiple of 16)",
    "optimizer.kind": "optimizer (adam)",
    "optimizer.lr": "learning rate",
    "optimizer.beta1": "first-moment decay",
    "optimizer.beta2": "second-moment decay",
    "optimizer.eps": "denominator epsilon",
    "batch_size": "ROIs per optimisation step",
    "epochs": "passes over the training ROIs",
    "loss_weights": "BCE and soft-IoU loss weights, comma separated",
    "augmentation.rotation_degrees": "max absolute random rotation",
    "augmentation.hflip_prob": "horizontal flip probability",
    "augmentation.vflip_prob": "vertical flip probability",
    "augmentation.elastic_alpha": "elastic displacement magnitude (px)",
    "augmentation.elastic_sigma": "elastic smoothing (px)",
    "augmentation.seed": "augmentation seed offset",
    "augment": "apply augmentation during training (true/false)",
    "box_jitter": "relative random scale/shift of training boxes",
    "pad_fraction": "ROI margin added on each side of a box",
    "seed": "global seed",
    "threshold": "nodule probability threshold for binary masks",
    "threads": "torch intra-op threads (1 for bitwise reproducibility)",
    "phantom.n_images": "number of synthetic slices",
    "phantom.image_size": "synthetic slice side length",
    "phantom.nodule_count_range": "min, max nodules per slice",
    "phantom.nodule_radius_range": "min, max nodule radius (px)",
    "phantom.nodule_contrast_range": "min, max nodule contrast (intensity levels)",
    "phantom.background_texture_scale": "smoothing scale of the background texture",
    "phantom.seed": "phantom seed",
}


def _parse_value(raw: str, tp, key: str):
    raw = raw.strip()
    origin = typing.get_origin(tp)
    try:
        if origin is tuple:
            args = typing.get_args(tp)
            parts = [p for p in raw.replace("(", "").replace(")", "").split(",") if p.strip()]
            if len(parts) != len(args):
                raise ValueError(f"expected {len(args)} comma-separated values")
            return tuple(_parse_value(p, a, key) for p, a in zip(parts, args))
        if tp is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError("expected true/false")
            return low in ("true", "1", "yes")
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r}: {exc}") from None


def _field_types(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def set_key(config, key: str, raw: str):
    """Return a copy of ``config`` with the dotted ``key`` set from its string form."""
    head, _, rest = key.partition(".")
    types = _field_types(type(config))
    if head not in types:
        raise ConfigError(f"unknown config key {key!r}")
    if rest:
        sub = getattr(config, head)
        if not dataclasses.is_dataclass(sub):
            raise ConfigError(f"unknown config key {key!r}")
        return dataclasses.replace(config, **{head: set_key(sub, rest, raw)})
    if dataclasses.is_dataclass(types[head]):
        raise ConfigError(f"{key!r} is a section; set one of its dotted keys")
    try:
        return dataclasses.replace(config, **{head: _parse_value(raw, types[head], key)})
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


def parse_config_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    config = base or ExperimentConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        config = set_key(config, key.strip(), value)
    return config


def load_config(path: str | Path | None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    config = ExperimentConfig()
    if path is not None:
        config = parse_config_text(Path(path).read_text(encoding="utf-8"), config)
    for key, value in (overrides or {}).items():
        config = set_key(config, key, value)
    config.validate()
    return config


def flatten(config, prefix: str = "") -> dict[str, object]:
    out: dict[str, object] = {}
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(value):
            out.update(flatten(value, key + "."))
        else:
            out[key] = value
    return out


def dump_config(config: ExperimentConfig) -> str:
    lines = []
    for key, value in flatten(config).items():
        if isinstance(value, tuple):
            value = ", ".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = str(value).lower()
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def keys_help() -> str:
    defaults = flatten(ExperimentConfig())
    return "\n".join(f"  {k:<36} {KEY_HELP.get(k, '')} (default: {defaults[k]})" for k in defaults)
