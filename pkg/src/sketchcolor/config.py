"""Shared domain types, the composite training objective, and configuration.

Image conventions used across the package:
  * color images are float tensors shaped (3, H, W) with values in [-1, 1]
  * sketch images are float tensors shaped (1, H, W) with values in [0, 1],
    where 1.0 is blank paper and 0.0 is a full stroke

Run configuration lives in a flat ``key = value`` text file; every key can be
overridden by a CLI flag of the same name.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping

MULTICLASS = "multiclass"
BINARY = "binary"


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class NonFiniteLossError(RuntimeError):
    """A loss term is NaN or infinite, i.e. training diverged."""


class Scheme(str, Enum):
    PAIRED = "paired"
    UNPAIRED = "unpaired"


class Variant(str, Enum):
    """Which auxiliary segmentation discriminators are active."""

    MULTICLASS = "multiclass"  # discriminator on the full class-probability map
    BINARY = "binary"          # discriminator on the foreground/background map
    BOTH = "both"


@dataclass(frozen=True)
class LossWeights:
    """Scalars of the composite objective w_g*l_g + w_b*l_b + w_m*l_m."""

    w_g: float = 1.0
    w_b: float = 1.0
    w_m: float = 1.0

    def __post_init__(self) -> None:
        for name in ("w_g", "w_b", "w_m"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"loss weight {name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class VariantConfig:
    variant: Variant = Variant.BOTH
    weights: LossWeights = field(default_factory=LossWeights)


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters shared by both training schemes."""

    scheme: Scheme = Scheme.PAIRED
    epochs: int = 200
    learning_rate: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 1
    image_size: int = 256
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.image_size % 4 != 0:
            raise ConfigError(f"image_size must be divisible by 4, got {self.image_size}")


def total_objective(l_g: float, l_b: float, l_m: float, w: LossWeights) -> float:
    """Composite objective: w_g*l_g + w_b*l_b + w_m*l_m.

    Raises NonFiniteLossError when any term is NaN/inf, which signals
    diverged training rather than a recoverable input problem.
    """
    for name, value in (("l_g", l_g), ("l_b", l_b), ("l_m", l_m)):
        if not math.isfinite(value):
            raise NonFiniteLossError(f"loss term {name} is non-finite ({value})")
    return w.w_g * l_g + w.w_b * l_b + w.w_m * l_m


def active_discriminators(v: VariantConfig | Variant) -> frozenset[str]:
    """Names of the auxiliary discriminators a variant enables."""
    variant = v.variant if isinstance(v, VariantConfig) else v
    if variant is Variant.MULTICLASS:
        return frozenset({MULTICLASS})
    if variant is Variant.BINARY:
        return frozenset({BINARY})
    if variant is Variant.BOTH:
        return frozenset({MULTICLASS, BINARY})
    raise ConfigError(f"unknown variant: {variant!r}")


# --------------------------------------------------------------------------
# Flat key=value configuration files
# --------------------------------------------------------------------------

def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; '#' starts a comment, blank lines ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config_file(path: str | Path) -> dict[str, str]:
    return parse_config_text(Path(path).read_text())


def _coerce(value: str, target_type: type) -> Any:
    if target_type is bool:
        lowered = value.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean from {value!r}")
    return target_type(value)


@dataclass(frozen=True)
class RunConfig:
    """Everything a training run needs, resolvable from file + CLI flags."""

    run_dir: str = "runs/run"
    data_root: str = "data/bedroom"
    dataset: str = "bedroom"
    train: TrainConfig = field(default_factory=TrainConfig)
    variant: VariantConfig = field(default_factory=VariantConfig)
    # Segmentation backend: "mock" or a path to a TorchScript module.
    seg_backend: str = "mock"
    num_classes: int = 135
    # Partition file path, or "things:<n>" for first-n-classes-as-foreground.
    partition: str = "things:80"
    seg_map_size: int = 256
    # Network capacity knobs; defaults match the 256x256 reference stacks.
    ngf: int = 64
    ndf: int = 64
    n_blocks: int = 9
    checkpoint_interval: int = 5

    FLAT_KEYS = (
        "run_dir", "data_root", "dataset", "scheme", "epochs", "learning_rate",
        "beta1", "beta2", "batch_size", "image_size", "seed", "variant",
        "w_g", "w_b", "w_m", "seg_backend", "num_classes", "partition",
        "seg_map_size", "ngf", "ndf", "n_blocks", "checkpoint_interval",
    )

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, str]) -> "RunConfig":
        unknown = set(mapping) - set(cls.FLAT_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")

        def take(key: str, typ: type, default: Any) -> Any:
            if key not in mapping or mapping[key] is None:
                return default
            return _coerce(str(mapping[key]), typ)

        train = TrainConfig(
            scheme=Scheme(take("scheme", str, TrainConfig.scheme.value)),
            epochs=take("epochs", int, TrainConfig.epochs),
            learning_rate=take("learning_rate", float, TrainConfig.learning_rate),
            beta1=take("beta1", float, TrainConfig.beta1),
            beta2=take("beta2", float, TrainConfig.beta2),
            batch_size=take("batch_size", int, TrainConfig.batch_size),
            image_size=take("image_size", int, TrainConfig.image_size),
            seed=take("seed", int, TrainConfig.seed),
        )
        variant = VariantConfig(
            variant=Variant(take("variant", str, Variant.BOTH.value)),
            weights=LossWeights(
                w_g=take("w_g", float, 1.0),
                w_b=take("w_b", float, 1.0),
                w_m=take("w_m", float, 1.0),
            ),
        )
        return cls(
            run_dir=take("run_dir", str, cls.run_dir),
            data_root=take("data_root", str, cls.data_root),
            dataset=take("dataset", str, cls.dataset),
            train=train,
            variant=variant,
            seg_backend=take("seg_backend", str, cls.seg_backend),
            num_classes=take("num_classes", int, cls.num_classes),
            partition=take("partition", str, cls.partition),
            seg_map_size=take("seg_map_size", int, cls.seg_map_size),
            ngf=take("ngf", int, cls.ngf),
            ndf=take("ndf", int, cls.ndf),
            n_blocks=take("n_blocks", int, cls.n_blocks),
            checkpoint_interval=take("checkpoint_interval", int, cls.checkpoint_interval),
        )

    @classmethod
    def load(cls, path: str | Path | None, overrides: Mapping[str, Any] | None = None) -> "RunConfig":
        mapping: dict[str, Any] = {}
        if path is not None:
            mapping.update(load_config_file(path))
        if overrides:
            mapping.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_mapping(mapping)

    def to_mapping(self) -> dict[str, str]:
        """Flat snapshot; ``from_mapping(to_mapping())`` round-trips."""
        return {
            "run_dir": self.run_dir,
            "data_root": self.data_root,
            "dataset": self.dataset,
            "scheme": self.train.scheme.value,
            "epochs": str(self.train.epochs),
            "learning_rate": repr(self.train.learning_rate),
            "beta1": repr(self.train.beta1),
            "beta2": repr(self.train.beta2),
            "batch_size": str(self.train.batch_size),
            "image_size": str(self.train.image_size),
            "seed": str(self.train.seed),
            "variant": self.variant.variant.value,
            "w_g": repr(self.variant.weights.w_g),
            "w_b": repr(self.variant.weights.w_b),
            "w_m": repr(self.variant.weights.w_m),
            "seg_backend": self.seg_backend,
            "num_classes": str(self.num_classes),
            "partition": self.partition,
            "seg_map_size": str(self.seg_map_size),
            "ngf": str(self.ngf),
            "ndf": str(self.ndf),
            "n_blocks": str(self.n_blocks),
            "checkpoint_interval": str(self.checkpoint_interval),
        }

    def with_weights(self, w_b: float, w_m: float) -> "RunConfig":
        weights = LossWeights(w_g=self.variant.weights.w_g, w_b=w_b, w_m=w_m)
        return replace(self, variant=replace(self.variant, weights=weights))
