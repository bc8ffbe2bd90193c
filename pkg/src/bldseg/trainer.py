"""Supervised training loop, validation-based model selection, checkpointing and evaluation."""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augmentation import augment, ramp_at, sample_rng
from .config import ConfigError, ModelConfig, TrainConfig
from .losses import compute_loss
from .metrics import MetricReport, check_report, confusion, make_report, merge
from .models import (
    DecoderSpec,
    SegmentationModel,
    build_model,
    encoder_spec,
    load_checkpoint,
    save_checkpoint,
)
from .models.core import check_input, forward
from .raster import DatasetManifest, NormalizationSpec, normalize
from .tta import TtaPlan, tta_predict

logger = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "train_loss", "val_loss", "val_building_iou", "val_miou", "ramp_scale")


class TrainingError(RuntimeError):
    pass


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_building_iou: float
    val_miou: float
    ramp_scale: float
    wall_time: float = 0.0

    def csv_row(self) -> dict:
        return {k: (repr(v) if isinstance(v, float) else v) for k, v in asdict(self).items() if k in HISTORY_FIELDS}


@dataclass
class TrainHistory:
    rows: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None

    def append(self, row: EpochRecord) -> None:
        if self.rows and row.epoch <= self.rows[-1].epoch:
            raise ValueError("history epochs must increase")
        self.rows.append(row)

    def column(self, name: str) -> list[float]:
        return [getattr(r, name) for r in self.rows]

    @classmethod
    def read_csv(cls, path: str | os.PathLike) -> "TrainHistory":
        h = cls()
        with open(path, newline="") as f:
            for rec in csv.DictReader(f):
                h.append(
                    EpochRecord(
                        int(rec["epoch"]), *(float(rec[k]) for k in HISTORY_FIELDS[1:])
                    )
                )
        return h


def model_from_config(mc: ModelConfig, normalization: NormalizationSpec | None = None, seed: int = 0) -> SegmentationModel:
    enc = encoder_spec(mc.encoder, mc.variant, mc.width_multiplier)
    dec = DecoderSpec(kind=mc.decoder, atrous_rates=mc.atrous_rates, aspp_channels=mc.aspp_channels, upsample=mc.upsample)
    return build_model(enc, dec, normalization, seed=seed)


def _to_tensor(images: np.ndarray, norm: NormalizationSpec) -> torch.Tensor:
    return torch.from_numpy(normalize(images, norm))


def predict_proba(
    model: SegmentationModel, images: np.ndarray, batch_size: int = 8, tta_plan: TtaPlan | None = None
) -> np.ndarray:
    """Building probabilities (N x H x W) for uint8 N x H x W x 3 images."""
    out = []
    for start in range(0, len(images), batch_size):
        x = _to_tensor(images[start : start + batch_size], model.normalization)
        prob = forward(model, x) if tta_plan is None else tta_predict(model, x, tta_plan)
        out.append(prob[:, 0].numpy())
    if not out:
        return np.zeros((0, *images.shape[1:3]), dtype=np.float32)
    return np.concatenate(out)


def evaluate_arrays(
    model: SegmentationModel,
    images: np.ndarray,
    masks: np.ndarray,
    tta_plan: TtaPlan | None = None,
    threshold: float = 0.5,
    aggregation: str = "micro",
    batch_size: int = 8,
    **fingerprint,
) -> MetricReport:
    if len(images) == 0:
        raise ConfigError("cannot evaluate an empty split")
    probs = predict_proba(model, images, batch_size, tta_plan)
    per_image = [confusion((p >= threshold).astype(np.uint8), m) for p, m in zip(probs, masks)]
    counts = per_image if aggregation == "macro" else merge(per_image)
    report = make_report(
        counts,
        aggregation=aggregation,
        threshold=threshold,
        tta=None if tta_plan is None else {**tta_plan.to_dict(), "variants": len(tta_plan)},
        **fingerprint,
    )
    check_report(report)
    return report


def evaluate(
    model: SegmentationModel | str | os.PathLike,
    manifest: DatasetManifest,
    split: str = "test",
    tta_plan: TtaPlan | None = None,
    threshold: float = 0.5,
    aggregation: str = "micro",
) -> MetricReport:
    if not isinstance(model, SegmentationModel):
        model, _ = load_checkpoint(model)
    images, masks, _ = manifest.load_split(split)
    if len(images) == 0:
        raise ConfigError(f"split {split!r} is empty")
    return evaluate_arrays(model, images, masks, tta_plan, threshold, aggregation, split=split)


def _batch(images, masks, idx, config: TrainConfig, epoch: int, norm: NormalizationSpec):
    xs, ys = [], []
    for i in idx:
        img, msk = images[i], masks[i]
        if config.augmentation is not None:
            img, msk, _, _ = augment(img, msk, config.augmentation, sample_rng(config.seed, epoch, int(i)), epoch)
        xs.append(img)
        ys.append(msk)
    x = _to_tensor(np.stack(xs), norm)
    y = torch.from_numpy(np.stack(ys).astype(np.float32)).unsqueeze(1)
    return x, y


@torch.no_grad()
def _validate(model, images, masks, config: TrainConfig) -> tuple[float, MetricReport]:
    model.eval()
    losses, weights, per_image = [], [], []
    for start in range(0, len(images), config.batch_size):
        x = _to_tensor(images[start : start + config.batch_size], model.normalization)
        y = torch.from_numpy(masks[start : start + config.batch_size].astype(np.float32)).unsqueeze(1)
        p = model(x)
        losses.append(float(compute_loss(config.loss, p, y)))
        weights.append(len(x))
        for pi, mi in zip(p[:, 0].numpy(), masks[start : start + config.batch_size]):
            per_image.append(confusion((pi >= config.threshold).astype(np.uint8), mi))
    report = make_report(merge(per_image), threshold=config.threshold)
    return float(np.average(losses, weights=weights)), report


def _score(row: EpochRecord, metric: str) -> float:
    return {"val_miou": row.val_miou, "val_building_iou": row.val_building_iou, "val_loss": -row.val_loss}[metric]


def fit_arrays(
    model: SegmentationModel,
    train_images: np.ndarray,
    train_masks: np.ndarray,
    val_images: np.ndarray,
    val_masks: np.ndarray,
    config: TrainConfig,
    out_dir: str | os.PathLike | None = None,
    metadata: dict | None = None,
    resume: bool = False,
) -> TrainHistory:
    """Train in place; on return ``model`` holds the best (by the selection metric) weights."""
    if len(train_images) == 0:
        raise ConfigError("training split is empty")
    if len(val_images) == 0:
        raise ConfigError("validation split is empty")
    check_input(model, torch.zeros(1, 3, *train_images.shape[1:3]))

    torch.manual_seed(config.seed)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=config.learning_rate, betas=config.betas, eps=config.eps, weight_decay=config.weight_decay
    )
    scheduler = None
    if config.lr_schedule == "cosine":
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=config.max_epochs)

    out = Path(out_dir) if out_dir is not None else None
    history = TrainHistory()
    metadata = dict(metadata or {})
    metadata.update(train_config=config.to_dict(), selection=f"max {config.selection_metric}")
    best_score, best_state, start_epoch = -math.inf, None, 0

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume and (out / "last.ckpt").exists():
            start_epoch, best_score = _resume(model, optimizer, scheduler, out, history, config)
            best_state = {k: v.clone() for k, v in load_checkpoint(out / "best.ckpt")[0].state_dict().items()}
        else:
            with open(out / "history.csv", "w", newline="") as f:
                csv.DictWriter(f, HISTORY_FIELDS).writeheader()
            with open(out / "timings.csv", "w", newline="") as f:
                f.write("epoch,wall_time\n")

    norm = model.normalization
    n = len(train_images)
    for epoch in range(start_epoch, config.max_epochs):
        t0 = time.perf_counter()
        model.train()
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            x, y = _batch(train_images, train_masks, idx, config, epoch, norm)
            optimizer.zero_grad()
            loss = compute_loss(config.loss, model(x), y)
            if not torch.isfinite(loss):
                logger.error("non-finite loss at epoch %d, batch samples %s", epoch, idx.tolist())
                raise TrainingError(f"non-finite loss {loss.item()} at epoch {epoch}, samples {idx.tolist()}")
            loss.backward()
            optimizer.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        if scheduler is not None:
            scheduler.step()

        val_loss, report = _validate(model, val_images, val_masks, config)
        row = EpochRecord(
            epoch=epoch,
            train_loss=total / seen,
            val_loss=val_loss,
            val_building_iou=report.iou["building"],
            val_miou=report.miou,
            ramp_scale=ramp_at(config.augmentation.schedule, epoch) if config.augmentation else 1.0,
            wall_time=time.perf_counter() - t0,
        )
        history.append(row)
        logger.info(
            "epoch %d  train_loss %.4f  val_loss %.4f  val_iou %.4f  val_miou %.4f",
            epoch, row.train_loss, row.val_loss, row.val_building_iou, row.val_miou,
        )
        score = _score(row, config.selection_metric)
        improved = score > best_score
        if improved:
            best_score = score
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            history.best_epoch = epoch
        if out is not None:
            _persist_epoch(model, optimizer, scheduler, out, row, improved, best_score, metadata)

    if best_state is not None:
        model.load_state_dict(best_state)
    if history.best_epoch is None and history.rows:
        history.best_epoch = max(history.rows, key=lambda r: _score(r, config.selection_metric)).epoch
    model.eval()
    return history


def _persist_epoch(model, optimizer, scheduler, out: Path, row: EpochRecord, improved: bool, best_score: float, metadata: dict):
    with open(out / "history.csv", "a", newline="") as f:
        csv.DictWriter(f, HISTORY_FIELDS).writerow(row.csv_row())
        f.flush()
    with open(out / "timings.csv", "a") as f:
        f.write(f"{row.epoch},{row.wall_time:.3f}\n")
    meta = {**metadata, "epoch": row.epoch, "val_miou": row.val_miou, "val_building_iou": row.val_building_iou}
    if improved:
        save_checkpoint(model, out / "best.ckpt", meta)
    save_checkpoint(model, out / "last.ckpt", {**meta, "best_score": best_score})
    state = {"optimizer": optimizer.state_dict(), "epoch": row.epoch, "best_score": best_score}
    if scheduler is not None:
        state["scheduler"] = scheduler.state_dict()
    torch.save(state, out / "last_optimizer.pt")


def _resume(model, optimizer, scheduler, out: Path, history: TrainHistory, config: TrainConfig) -> tuple[int, float]:
    last, _ = load_checkpoint(out / "last.ckpt")
    model.load_state_dict(last.state_dict())
    state = torch.load(out / "last_optimizer.pt", weights_only=False)
    optimizer.load_state_dict(state["optimizer"])
    if scheduler is not None and "scheduler" in state:
        scheduler.load_state_dict(state["scheduler"])
    for row in TrainHistory.read_csv(out / "history.csv").rows:
        history.append(row)
    best = max(history.rows, key=lambda r: _score(r, config.selection_metric))
    history.best_epoch = best.epoch
    logger.info("resuming after epoch %d", state["epoch"])
    return state["epoch"] + 1, state["best_score"]


def train(
    model: SegmentationModel,
    manifest: DatasetManifest,
    config: TrainConfig,
    out_dir: str | os.PathLike,
    config_hash: str | None = None,
    resume: bool = False,
) -> tuple[Path, TrainHistory]:
    """Train on the manifest's train split, select on val; returns (best checkpoint, history)."""
    train_x, train_y, _ = manifest.load_split("train")
    val_x, val_y, _ = manifest.load_split("val")
    if len(train_x) == 0 or len(val_x) == 0:
        raise ConfigError("manifest needs non-empty train and val splits")
    history = fit_arrays(
        model, train_x, train_y, val_x, val_y, config, out_dir, metadata={"config_hash": config_hash}, resume=resume
    )
    return Path(out_dir) / "best.ckpt", history
