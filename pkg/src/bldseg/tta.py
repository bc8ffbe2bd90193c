"""Test-time augmentation: run a model on transformed copies of an image, map every
prediction back to the original geometry and average the probabilities."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .models.core import SegmentationModel, as_batch, forward
from .raster import NormalizationSpec

ROTATIONS = (0, 90, 180, 270)


class TtaError(ValueError):
    pass


@dataclass(frozen=True)
class TtaTransform:
    kind: str  # hflip | rotate | rescale | multiply
    parameter: float | bool

    @property
    def geometric(self) -> bool:
        return self.kind != "multiply"


@dataclass(frozen=True)
class TtaVariant:
    hflip: bool = False
    degrees: int = 0  # clockwise
    scale: float = 1.0
    multiplier: float = 1.0

    def __post_init__(self):
        if self.degrees not in ROTATIONS:
            raise TtaError(f"rotation must be one of {ROTATIONS}, got {self.degrees}")
        if self.scale <= 0 or self.multiplier <= 0:
            raise TtaError("scale and multiplier must be positive")

    @property
    def is_identity(self) -> bool:
        return not self.hflip and self.degrees == 0 and self.scale == 1 and self.multiplier == 1

    def transforms(self) -> list[TtaTransform]:
        return [
            TtaTransform("multiply", self.multiplier),
            TtaTransform("hflip", self.hflip),
            TtaTransform("rotate", self.degrees),
            TtaTransform("rescale", self.scale),
        ]

    def label(self) -> str:
        return f"flip={int(self.hflip)} rot={self.degrees} scale={self.scale:g} mult={self.multiplier:g}"


@dataclass(frozen=True)
class TtaPlan:
    flip_options: tuple[bool, ...] = (False,)
    rotation_degrees: tuple[int, ...] = (0,)
    scale_factors: tuple[float, ...] = (1.0,)
    multipliers: tuple[float, ...] = (1.0,)
    merge: str = "mean"
    threshold: float = 0.5

    def __post_init__(self):
        # identity members are always part of the plan
        object.__setattr__(self, "flip_options", tuple(sorted(set(self.flip_options) | {False})))
        object.__setattr__(self, "rotation_degrees", tuple(sorted(set(int(d) for d in self.rotation_degrees) | {0})))
        object.__setattr__(self, "scale_factors", tuple(sorted(set(float(s) for s in self.scale_factors) | {1.0})))
        object.__setattr__(self, "multipliers", tuple(sorted(set(float(m) for m in self.multipliers) | {1.0})))
        if self.merge != "mean":
            raise TtaError(f"only the 'mean' merge rule is supported, got {self.merge!r}")
        for d in self.rotation_degrees:
            if d not in ROTATIONS:
                raise TtaError(f"rotation must be one of {ROTATIONS}, got {d}")
        if any(s <= 0 for s in self.scale_factors) or any(m <= 0 for m in self.multipliers):
            raise TtaError("scale factors and multipliers must be positive")

    @property
    def variants(self) -> list[TtaVariant]:
        return [
            TtaVariant(f, d, s, m)
            for f, d, s, m in itertools.product(
                self.flip_options, self.rotation_degrees, self.scale_factors, self.multipliers
            )
        ]

    def __len__(self) -> int:
        return len(self.flip_options) * len(self.rotation_degrees) * len(self.scale_factors) * len(self.multipliers)

    def to_dict(self) -> dict:
        return {
            "hflip": True in self.flip_options,
            "rotations": list(self.rotation_degrees),
            "scales": list(self.scale_factors),
            "multipliers": list(self.multipliers),
            "merge": self.merge,
            "threshold": self.threshold,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TtaPlan":
        if "preset" in d:
            return preset(d["preset"])
        return cls(
            flip_options=(False, True) if d.get("hflip", False) else (False,),
            rotation_degrees=tuple(d.get("rotations", (0,))),
            scale_factors=tuple(d.get("scales", (1.0,))),
            multipliers=tuple(d.get("multipliers", (1.0,))),
            merge=d.get("merge", "mean"),
            threshold=float(d.get("threshold", 0.5)),
        )


PRESETS = {
    "method1": dict(flip_options=(False, True), rotation_degrees=(0, 180), scale_factors=(1,), multipliers=(0.9, 1, 1.1)),
    "method2": dict(
        flip_options=(False, True), rotation_degrees=(0, 180), scale_factors=(0.25, 0.5, 0.75, 1), multipliers=(0.9, 1, 1.1)
    ),
    "method3": dict(flip_options=(False, True), rotation_degrees=(0, 90), scale_factors=(0.5, 0.75, 1), multipliers=(1,)),
    "identity": dict(),
    "multiscale": dict(scale_factors=(0.5, 0.75, 1)),
}


def preset(name: str) -> TtaPlan:
    try:
        return TtaPlan(**PRESETS[name])
    except KeyError:
        raise TtaError(f"unknown TTA preset {name!r}; valid presets: {sorted(PRESETS)}") from None


# ---------------------------------------------------------------------------
# transforms


def rescaled_size(size: int, scale: float, multiple: int = 1) -> int:
    target = int(round(size * scale / multiple)) * multiple
    if target < multiple or target < 1:
        raise TtaError(f"scale {scale} turns size {size} into {target}, below the minimum of {multiple}")
    return target


def _multiply(x: torch.Tensor, m: float, norm: NormalizationSpec | None) -> torch.Tensor:
    if m == 1:
        return x
    if norm is None:
        return (x * m).clamp(0.0, 1.0)
    mean = torch.tensor(norm.mean, dtype=x.dtype).view(1, 3, 1, 1)
    std = torch.tensor(norm.std, dtype=x.dtype).view(1, 3, 1, 1)
    raw = (x * std + mean) * m
    return (raw.clamp(0.0, 1.0) - mean) / std


def apply_forward(
    image, variant: TtaVariant, normalization: NormalizationSpec | None = None, multiple: int = 1
) -> torch.Tensor:
    """Transform a B x C x H x W batch. ``normalization`` set means the input is normalized and
    multiplication acts on the recovered [0, 1] intensities; otherwise the input is taken as [0, 1]."""
    x = image if isinstance(image, torch.Tensor) else torch.as_tensor(image)
    squeeze = x.ndim == 3
    if squeeze:
        x = x.unsqueeze(0)
    x = _multiply(x, variant.multiplier, normalization)
    x = _geometry_forward(x, variant, multiple)
    return x[0] if squeeze else x


def _geometry_forward(x: torch.Tensor, variant: TtaVariant, multiple: int = 1) -> torch.Tensor:
    if variant.hflip:
        x = torch.flip(x, dims=(-1,))
    if variant.degrees:
        x = torch.rot90(x, k=-(variant.degrees // 90), dims=(-2, -1))
    if variant.scale != 1:
        h, w = x.shape[-2:]
        size = (rescaled_size(h, variant.scale, multiple), rescaled_size(w, variant.scale, multiple))
        if size != (h, w):
            x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
    return x


def forward_geometry(prob_map, variant: TtaVariant, multiple: int = 1) -> torch.Tensor:
    """Geometric part of :func:`apply_forward` on a map (what a perfectly equivariant model outputs)."""
    x = torch.as_tensor(prob_map)
    squeeze = x.ndim == 3
    x = _geometry_forward(x.unsqueeze(0) if squeeze else x, variant, multiple)
    return x[0] if squeeze else x


def invert_prediction(prob_map, variant: TtaVariant, original_size: tuple[int, int] | None = None) -> torch.Tensor:
    """Map a prediction made under ``variant`` back onto the original image grid."""
    x = prob_map if isinstance(prob_map, torch.Tensor) else torch.as_tensor(prob_map)
    squeeze = x.ndim == 3
    if squeeze:
        x = x.unsqueeze(0)
    if variant.scale != 1 and original_size is not None:
        # rotation by 90/270 swaps axes; undo scaling in the rotated frame
        h, w = original_size
        size = (w, h) if variant.degrees in (90, 270) else (h, w)
        if tuple(x.shape[-2:]) != size:
            x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
    if variant.degrees:
        x = torch.rot90(x, k=variant.degrees // 90, dims=(-2, -1))
    if variant.hflip:
        x = torch.flip(x, dims=(-1,))
    return x[0] if squeeze else x


def merge_predictions(maps: Sequence[torch.Tensor], weights: Sequence[float] | None = None) -> torch.Tensor:
    """Arithmetic (optionally weighted) mean, summed in the given order."""
    if not maps:
        raise TtaError("nothing to merge")
    if weights is None:
        acc = maps[0].clone()
        for m in maps[1:]:
            acc += m
        return acc / len(maps)
    acc = maps[0] * weights[0]
    for m, w in zip(maps[1:], weights[1:]):
        acc = acc + m * w
    return acc / float(sum(weights))


def tta_predict(model: SegmentationModel, image, plan: TtaPlan, return_all: bool = False):
    """Merged probability map (B x 1 x H x W) over every variant of ``plan``."""
    x = as_batch(image)
    size = tuple(x.shape[-2:])
    maps = []
    for variant in plan.variants:
        xv = apply_forward(x, variant, model.normalization, model.required_multiple)
        maps.append(invert_prediction(forward(model, xv), variant, size))
    merged = merge_predictions(maps)
    return (merged, maps) if return_all else merged
