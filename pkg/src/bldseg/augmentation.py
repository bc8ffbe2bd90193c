"""Training-time augmentation: one randomly chosen op per sample, gated by a probability,
with magnitudes that grow over training through a ramp schedule.

Images are channel-last floats in [0, 1] (uint8 inputs are converted and converted back).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

GEOMETRIC_KINDS = frozenset({"rotate", "affine", "translate", "horizontal_flip"})
PHOTOMETRIC_KINDS = frozenset({"invert_colors", "random_contrast", "random_brightness"})
KINDS = GEOMETRIC_KINDS | PHOTOMETRIC_KINDS

DEFAULT_RANGES = {
    "rotate": (-30.0, 30.0),  # degrees
    "affine": (-10.0, 10.0),  # shear, degrees
    "translate": (-0.1, 0.1),  # fraction of the side
    "invert_colors": (0.0, 0.0),
    "random_contrast": (-0.2, 0.2),  # multiplicative delta
    "random_brightness": (-0.2, 0.2),  # additive delta on [0, 1] intensities
    "horizontal_flip": (0.0, 0.0),
}


@dataclass(frozen=True)
class AugmentationOp:
    kind: str
    magnitude_range: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown augmentation {self.kind!r}; choose from {sorted(KINDS)}")
        lo, hi = self.magnitude_range
        if lo > hi:
            raise ValueError(f"{self.kind}: magnitude range ({lo}, {hi}) has lo > hi")
        object.__setattr__(self, "magnitude_range", (float(lo), float(hi)))

    @property
    def geometric(self) -> bool:
        return self.kind in GEOMETRIC_KINDS

    @classmethod
    def default(cls, kind: str) -> "AugmentationOp":
        return cls(kind, DEFAULT_RANGES[kind])


@dataclass(frozen=True)
class LinearRamp:
    """Intensity scale rising linearly from ``floor`` at epoch 0 to 1.0 at ``epoch_max``."""

    epoch_max: int = 20
    floor: float = 0.25

    def __post_init__(self):
        if self.epoch_max < 1:
            raise ValueError("epoch_max must be >= 1")
        if not (0.0 < self.floor <= 1.0):
            raise ValueError("ramp floor must lie in (0, 1]")

    def __call__(self, epoch: float) -> float:
        return ramp_at(self, epoch)


def ramp_at(schedule: LinearRamp, epoch: float) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    frac = min(epoch / schedule.epoch_max, 1.0)
    return schedule.floor + (1.0 - schedule.floor) * frac


def _default_ops() -> list[AugmentationOp]:
    return [AugmentationOp.default(k) for k in DEFAULT_RANGES]


@dataclass(frozen=True)
class AugmentationPolicy:
    ops: tuple[AugmentationOp, ...] = field(default_factory=lambda: tuple(_default_ops()))
    apply_probability: float = 0.5
    schedule: LinearRamp = field(default_factory=LinearRamp)

    def __post_init__(self):
        object.__setattr__(self, "ops", tuple(self.ops))
        if not self.ops:
            raise ValueError("augmentation policy needs at least one op")
        if not (0.0 <= self.apply_probability <= 1.0):
            raise ValueError(f"apply_probability must lie in [0, 1], got {self.apply_probability}")

    def to_dict(self) -> dict:
        return {
            "ops": [{"kind": op.kind, "range": list(op.magnitude_range)} for op in self.ops],
            "apply_probability": self.apply_probability,
            "epoch_max": self.schedule.epoch_max,
            "ramp_floor": self.schedule.floor,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationPolicy":
        ops = d.get("ops")
        if ops is None:
            parsed = _default_ops()
        else:
            parsed = []
            for o in ops:
                if isinstance(o, str):
                    parsed.append(AugmentationOp.default(o))
                else:
                    parsed.append(AugmentationOp(o["kind"], tuple(o.get("range", DEFAULT_RANGES.get(o["kind"], (0, 0))))))
        return cls(
            ops=tuple(parsed),
            apply_probability=float(d.get("apply_probability", 0.5)),
            schedule=LinearRamp(int(d.get("epoch_max", 20)), float(d.get("ramp_floor", 0.25))),
        )


def sample_op(policy: AugmentationPolicy, rng: np.random.Generator, epoch: float = 0) -> tuple[bool, AugmentationOp, float]:
    """Draw (applied, op, magnitude); always consumes three draws so streams stay aligned."""
    applied = bool(rng.random() < policy.apply_probability)
    op = policy.ops[int(rng.integers(len(policy.ops)))]
    scale = ramp_at(policy.schedule, epoch)
    lo, hi = op.magnitude_range
    magnitude = float(rng.uniform(lo * scale, hi * scale)) if hi > lo else lo * scale
    return applied, op, magnitude


def sample_rng(seed: int, epoch: int, index: int, worker: int = 0) -> np.random.Generator:
    """Independent sub-stream per (seed, worker, epoch, sample index)."""
    return np.random.default_rng(np.random.SeedSequence([seed, worker, epoch, index]))


# ---------------------------------------------------------------------------
# op implementations


def _warp(image: np.ndarray, mask: np.ndarray, matrix: np.ndarray, offset: np.ndarray):
    fill = image.reshape(-1, image.shape[-1]).mean(axis=0)
    out = np.empty_like(image)
    for c in range(image.shape[-1]):
        out[..., c] = ndimage.affine_transform(image[..., c], matrix, offset=offset, order=1, mode="constant", cval=fill[c])
    out_mask = ndimage.affine_transform(mask, matrix, offset=offset, order=0, mode="constant", cval=0)
    return out, out_mask


def _centered(matrix: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    center = (np.asarray(shape, dtype=np.float64) - 1) / 2
    return center - matrix @ center


def _rotate(image, mask, degrees):
    if degrees % 90 == 0:
        k = int(degrees // 90) % 4
        # positive angles turn counter-clockwise, like np.rot90
        return np.rot90(image, k, axes=(0, 1)).copy(), np.rot90(mask, k).copy()
    t = np.deg2rad(degrees)
    # output (row, col) -> input coordinates
    m = np.array([[np.cos(t), np.sin(t)], [-np.sin(t), np.cos(t)]])
    return _warp(image, mask, m, _centered(m, mask.shape))


def _shear(image, mask, degrees):
    m = np.array([[1.0, 0.0], [np.tan(np.deg2rad(degrees)), 1.0]])
    return _warp(image, mask, m, _centered(m, mask.shape))


def _translate(image, mask, fraction):
    h, w = mask.shape
    dy, dx = int(round(fraction * h)), int(round(fraction * w))
    fill = image.reshape(-1, image.shape[-1]).mean(axis=0)
    out = np.empty_like(image)
    out[...] = fill
    out_mask = np.zeros_like(mask)
    src_r = slice(max(0, -dy), h - max(0, dy))
    dst_r = slice(max(0, dy), h - max(0, -dy))
    src_c = slice(max(0, -dx), w - max(0, dx))
    dst_c = slice(max(0, dx), w - max(0, -dx))
    out[dst_r, dst_c] = image[src_r, src_c]
    out_mask[dst_r, dst_c] = mask[src_r, src_c]
    return out, out_mask


def _in_range(op: AugmentationOp, magnitude: float) -> bool:
    lo, hi = op.magnitude_range
    # ramp scales shrink ranges toward zero, so accept the hull of range and 0
    return min(lo, 0.0) - 1e-12 <= magnitude <= max(hi, 0.0) + 1e-12


def apply(image: np.ndarray, mask: np.ndarray, op: AugmentationOp, magnitude: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Apply one op to an (image, mask) pair. Geometric ops move both; photometric ops only the image."""
    if not _in_range(op, magnitude):
        raise ValueError(f"{op.kind}: magnitude {magnitude} outside {op.magnitude_range}")
    raw = image.dtype == np.uint8
    x = image.astype(np.float64) / 255.0 if raw else np.asarray(image, dtype=np.float64)
    m = np.asarray(mask)

    kind = op.kind
    if kind == "horizontal_flip":
        x, m = x[:, ::-1].copy(), m[:, ::-1].copy()
    elif kind == "rotate":
        if magnitude != 0:
            x, m = _rotate(x, m, magnitude)
    elif kind == "affine":
        if magnitude != 0:
            x, m = _shear(x, m, magnitude)
    elif kind == "translate":
        x, m = _translate(x, m, magnitude)
    elif kind == "invert_colors":
        x = 1.0 - x
    elif kind == "random_brightness":
        x = np.clip(x + magnitude, 0.0, 1.0)
    elif kind == "random_contrast":
        mean = x.reshape(-1, x.shape[-1]).mean(axis=0)
        x = np.clip((x - mean) * (1.0 + magnitude) + mean, 0.0, 1.0)

    if raw:
        return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8), m
    return x.astype(image.dtype, copy=False), m


def augment(image: np.ndarray, mask: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator, epoch: float = 0):
    """Sample and apply at most one op. Returns (image, mask, op-or-None, magnitude)."""
    applied, op, magnitude = sample_op(policy, rng, epoch)
    if not applied:
        return image, mask, None, 0.0
    out_img, out_mask = apply(image, mask, op, magnitude)
    return out_img, out_mask, op, magnitude
