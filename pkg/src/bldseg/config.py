"""Experiment configuration: one JSON document with data/model/loss/augmentation/tta/trainer sections."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .augmentation import AugmentationPolicy
from .losses import LossConfig, LossConfigError
from .tta import TtaError, TtaPlan

SECTIONS = ("data", "model", "loss", "augmentation", "tta", "trainer")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field (and line for parse errors)."""


@dataclass(frozen=True)
class DataConfig:
    manifest: str = "manifest.json"
    tile_size: int = 512
    stride: int = 512
    val_fraction: float = 0.1


@dataclass(frozen=True)
class ModelConfig:
    encoder: str = "vgg"
    variant: str = "16"
    width_multiplier: float = 1.0
    decoder: str = "unetpp"
    atrous_rates: tuple[int, ...] = (6, 12, 18)
    aspp_channels: int | None = None
    upsample: str = "bilinear"


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    lr_schedule: str = "none"  # none | cosine
    max_epochs: int = 20
    seed: int = 0
    selection_metric: str = "val_miou"
    threshold: float = 0.5
    loss: LossConfig = field(default_factory=LossConfig)
    augmentation: AugmentationPolicy | None = field(default_factory=AugmentationPolicy)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"trainer.batch_size: must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"trainer.learning_rate: must be > 0, got {self.learning_rate}")
        if self.max_epochs < 1:
            raise ConfigError(f"trainer.max_epochs: must be >= 1, got {self.max_epochs}")
        if self.lr_schedule not in ("none", "cosine"):
            raise ConfigError(f"trainer.lr_schedule: must be 'none' or 'cosine', got {self.lr_schedule!r}")
        if self.selection_metric not in ("val_miou", "val_building_iou", "val_loss"):
            raise ConfigError(f"trainer.selection_metric: unknown metric {self.selection_metric!r}")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("loss", "augmentation")}
        d["betas"] = list(self.betas)
        d["loss"] = self.loss.to_dict()
        d["augmentation"] = None if self.augmentation is None else self.augmentation.to_dict()
        return d


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    tta: TtaPlan | None = None

    def to_dict(self) -> dict:
        t = self.trainer.to_dict()
        loss, aug = t.pop("loss"), t.pop("augmentation")
        m = asdict(self.model)
        m["atrous_rates"] = list(self.model.atrous_rates)
        return {
            "data": asdict(self.data),
            "model": m,
            "loss": loss,
            "augmentation": aug,
            "tta": None if self.tta is None else self.tta.to_dict(),
            "trainer": t,
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def _section(cls, d: dict | None, name: str):
    d = dict(d or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"{name}.{unknown[0]}: unknown field (valid: {sorted(known)})")
    for key in ("atrous_rates", "betas"):
        if key in d and d[key] is not None:
            d[key] = tuple(d[key])
    try:
        return cls(**d)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{name}: {e}") from e


def config_from_dict(d: dict) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigError("config root must be an object")
    unknown = sorted(set(d) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown section (valid: {list(SECTIONS)})")
    try:
        loss = LossConfig.from_dict(d.get("loss") or {})
    except (LossConfigError, TypeError) as e:
        raise ConfigError(f"loss: {e}") from e
    aug_d = d.get("augmentation", {})
    try:
        aug = None if aug_d is None else AugmentationPolicy.from_dict(aug_d)
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"augmentation: {e}") from e
    try:
        tta = None if d.get("tta") is None else TtaPlan.from_dict(d["tta"])
    except (TtaError, TypeError) as e:
        raise ConfigError(f"tta: {e}") from e
    trainer_d = dict(d.get("trainer") or {})
    trainer = _section(TrainConfig, {**trainer_d, "loss": loss, "augmentation": aug}, "trainer")
    return ExperimentConfig(
        data=_section(DataConfig, d.get("data"), "data"),
        model=_section(ModelConfig, d.get("model"), "model"),
        trainer=trainer,
        tta=tta,
    )


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"{path}: config file not found") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None
    return config_from_dict(d)
