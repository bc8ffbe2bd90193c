"""Pixel confusion counts and Jaccard (IoU / mIoU) reports for the building/background problem."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

CLASSES = ("background", "building")


class ReportInconsistency(ValueError):
    pass


@dataclass(frozen=True)
class ClassCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ClassCounts") -> "ClassCounts":
        return ClassCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class ConfusionCounts:
    """Per-class tallies. Immutable; ``+`` merges partial counts."""

    building: ClassCounts = field(default_factory=ClassCounts)
    background: ClassCounts = field(default_factory=ClassCounts)

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.building + other.building, self.background + other.background)

    def __getitem__(self, cls: str) -> ClassCounts:
        if cls not in CLASSES:
            raise KeyError(f"unknown class {cls!r}; choose from {CLASSES}")
        return getattr(self, cls)

    @property
    def total_pixels(self) -> int:
        return self.building.total

    def to_dict(self) -> dict:
        return {c: vars(self[c]).copy() for c in CLASSES}

    @classmethod
    def from_building(cls, tp: int, fp: int, fn: int, tn: int) -> "ConfusionCounts":
        """Binary problem: background counts are the building counts with roles swapped."""
        return cls(ClassCounts(tp, fp, fn, tn), ClassCounts(tn, fn, fp, tp))


def _binary(mask, name: str) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.dtype == bool:
        return arr
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} must be binary (0/1)")
    return arr.astype(bool)


def confusion(pred_mask, gt_mask) -> ConfusionCounts:
    pred = _binary(pred_mask, "prediction")
    gt = _binary(gt_mask, "ground truth")
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    tn = int(pred.size) - tp - fp - fn
    return ConfusionCounts.from_building(tp, fp, fn, tn)


def accumulate(counts: ConfusionCounts, pred_mask, gt_mask) -> ConfusionCounts:
    return counts + confusion(pred_mask, gt_mask)


def merge(parts: Iterable[ConfusionCounts]) -> ConfusionCounts:
    total = ConfusionCounts()
    for p in parts:
        total = total + p
    return total


def iou(counts: ConfusionCounts, cls: str = "building") -> float:
    c = counts[cls]
    union = c.tp + c.fp + c.fn
    if union == 0:
        return 1.0
    return c.tp / union


def miou(counts: ConfusionCounts, exclude_vacuous: bool = False) -> float:
    vals = []
    for cls in CLASSES:
        c = counts[cls]
        if exclude_vacuous and c.tp + c.fp + c.fn == 0:
            continue
        vals.append(iou(counts, cls))
    if not vals:
        return 1.0
    return sum(vals) / len(vals)


@dataclass
class MetricReport:
    iou: dict[str, float]
    miou: float
    pixels: int
    counts: dict
    fingerprint: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "iou": self.iou,
            "miou": self.miou,
            "pixels": self.pixels,
            "counts": self.counts,
            "fingerprint": self.fingerprint,
        }

    def save(self, path: str | os.PathLike) -> Path:
        check_report(self)
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        os.replace(tmp, path)
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "MetricReport":
        d = json.loads(Path(path).read_text())
        return cls(d["iou"], d["miou"], d["pixels"], d["counts"], d.get("fingerprint", {}))


def make_report(
    counts: ConfusionCounts | list[ConfusionCounts],
    aggregation: str = "micro",
    exclude_vacuous: bool = False,
    threshold: float = 0.5,
    **fingerprint,
) -> MetricReport:
    """Build a report from global counts (micro) or per-image counts averaged (macro)."""
    if aggregation == "micro":
        total = merge(counts) if isinstance(counts, list) else counts
        ious = {c: iou(total, c) for c in CLASSES}
        if exclude_vacuous:
            ious = {c: v for c, v in ious.items() if total[c].tp + total[c].fp + total[c].fn > 0} or ious
    elif aggregation == "macro":
        if not isinstance(counts, list) or not counts:
            raise ValueError("macro aggregation needs a non-empty list of per-image counts")
        total = merge(counts)
        ious = {}
        for c in CLASSES:
            per = [iou(k, c) for k in counts if not (exclude_vacuous and k[c].tp + k[c].fp + k[c].fn == 0)]
            if per:
                ious[c] = float(np.mean(per))
        ious = ious or {c: 1.0 for c in CLASSES}
    else:
        raise ValueError(f"aggregation must be 'micro' or 'macro', got {aggregation!r}")
    fp = {"aggregation": aggregation, "vacuous_iou": "excluded" if exclude_vacuous else 1.0, "threshold": threshold}
    fp.update(fingerprint)
    return MetricReport(
        iou=ious,
        miou=sum(ious.values()) / len(ious),
        pixels=total.total_pixels,
        counts=total.to_dict(),
        fingerprint=fp,
    )


def check_report(report: MetricReport, tol: float = 1e-12) -> None:
    """Raise if the mIoU is not the mean of the per-class IoUs or any IoU leaves [0, 1]."""
    vals = list(report.iou.values())
    if not vals:
        raise ReportInconsistency("report has no per-class IoU")
    for cls, v in report.iou.items():
        if not (0.0 <= v <= 1.0):
            raise ReportInconsistency(f"IoU of {cls} is {v}, outside [0, 1]")
    mean = sum(vals) / len(vals)
    if abs(report.miou - mean) > tol:
        raise ReportInconsistency(f"mIoU {report.miou} differs from class mean {mean}")


def implied_background_iou(building_iou: float, miou_value: float) -> float:
    """Background IoU forced by a reported (building IoU, mIoU) pair for two classes."""
    bg = 2 * miou_value - building_iou
    if not (0.0 <= bg <= 1.0):
        raise ReportInconsistency(f"building IoU {building_iou} and mIoU {miou_value} imply background IoU {bg}")
    return bg


def threshold(prob, level: float = 0.5) -> np.ndarray:
    return (np.asarray(prob) >= level).astype(np.uint8)
