"""Dice, weighted Dice, Tversky and Focal Tversky losses on soft building probabilities.

All losses sum their overlap terms over the whole batch by default; ``per_image=True``
computes the loss per image and averages.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
import torch

LOSS_KINDS = ("dice", "weighted_dice", "tversky", "focal_tversky")


class LossConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    kind: str = "weighted_dice"
    alpha: float = 0.5
    beta: float = 0.5
    gamma: float = 4.0 / 3.0
    epsilon: float = 1.0
    class_weights: tuple[float, float] = (0.3, 0.7)  # (background, building)
    per_image: bool = False

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise LossConfigError(f"unknown loss {self.kind!r}; choose from {LOSS_KINDS}")
        if not (0 <= self.alpha <= 1 and 0 <= self.beta <= 1):
            raise LossConfigError("alpha and beta must lie in [0, 1]")
        if self.kind in ("tversky", "focal_tversky") and abs(self.alpha + self.beta - 1.0) > 1e-9:
            raise LossConfigError(f"tversky losses need alpha + beta = 1, got {self.alpha} + {self.beta}")
        if self.gamma < 1:
            raise LossConfigError(f"gamma must be >= 1, got {self.gamma}")
        if self.epsilon < 0:
            raise LossConfigError("epsilon must be >= 0")
        w = tuple(float(x) for x in self.class_weights)
        if len(w) != 2 or min(w) < 0 or sum(w) == 0:
            raise LossConfigError(f"class weights must be two non-negative values, not both zero; got {w}")
        object.__setattr__(self, "class_weights", w)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        d = dict(d)
        if "class_weights" in d:
            d["class_weights"] = tuple(d["class_weights"])
        return cls(**d)

    def loss_fn(self) -> Callable[[torch.Tensor, torch.Tensor], torch.Tensor]:
        return lambda p, g: compute_loss(self, p, g)


def _check(p: torch.Tensor, g: torch.Tensor):
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {tuple(p.shape)} does not match target {tuple(g.shape)}")


def _sum(x: torch.Tensor, per_image: bool) -> torch.Tensor:
    if per_image and x.ndim > 1:
        return x.reshape(x.shape[0], -1).sum(dim=1)
    return x.sum()


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def dice_loss(p, g, epsilon: float = 1.0, per_image: bool = False) -> torch.Tensor:
    p, g = _as_tensor(p), _as_tensor(g).to(_as_tensor(p).dtype)
    _check(p, g)
    inter = _sum(p * g, per_image)
    denom = _sum(p, per_image) + _sum(g, per_image)
    loss = 1 - (2 * inter + epsilon) / (denom + epsilon)
    return loss.mean()


def weighted_dice_loss(p, g, class_weights=(0.3, 0.7), epsilon: float = 1.0, per_image: bool = False) -> torch.Tensor:
    w_bg, w_b = (float(w) for w in class_weights)
    if w_bg < 0 or w_b < 0 or w_bg + w_b == 0:
        raise LossConfigError(f"class weights must be non-negative and not both zero, got {class_weights}")
    p, g = _as_tensor(p), _as_tensor(g).to(_as_tensor(p).dtype)
    _check(p, g)
    building = dice_loss(p, g, epsilon, per_image)
    background = dice_loss(1 - p, 1 - g, epsilon, per_image)
    return (w_b * building + w_bg * background) / (w_b + w_bg)


def tversky_index(p, g, alpha: float, beta: float, epsilon: float = 1.0, per_image: bool = False) -> torch.Tensor:
    """(TP + eps) / (TP + alpha*FP + beta*FN + eps) with soft counts; no alpha+beta constraint."""
    p, g = _as_tensor(p), _as_tensor(g).to(_as_tensor(p).dtype)
    _check(p, g)
    tp = _sum(p * g, per_image)
    fp = _sum(p * (1 - g), per_image)
    fn = _sum((1 - p) * g, per_image)
    return (tp + epsilon) / (tp + alpha * fp + beta * fn + epsilon)


def tversky_loss(p, g, alpha: float = 0.5, beta: float = 0.5, epsilon: float = 1.0, per_image: bool = False) -> torch.Tensor:
    if abs(alpha + beta - 1.0) > 1e-9:
        raise LossConfigError(f"tversky loss needs alpha + beta = 1, got {alpha} + {beta}")
    return (1 - tversky_index(p, g, alpha, beta, epsilon, per_image)).mean()


def focal_tversky_loss(
    p, g, alpha: float = 0.5, beta: float = 0.5, gamma: float = 4.0 / 3.0, epsilon: float = 1.0, per_image: bool = False
) -> torch.Tensor:
    """(1 - TI) ** (1 / gamma)."""
    if gamma < 1:
        raise LossConfigError(f"gamma must be >= 1, got {gamma}")
    if gamma == 1:
        return tversky_loss(p, g, alpha, beta, epsilon, per_image)
    if abs(alpha + beta - 1.0) > 1e-9:
        raise LossConfigError(f"tversky loss needs alpha + beta = 1, got {alpha} + {beta}")
    base = 1 - tversky_index(p, g, alpha, beta, epsilon, per_image)
    # the root has an unbounded slope at 0; clamping zeroes the gradient at a perfect fit
    base = base.clamp_min(torch.finfo(base.dtype).tiny)
    return (base ** (1.0 / gamma)).mean()


def compute_loss(config: LossConfig, p, g) -> torch.Tensor:
    k = config.kind
    if k == "dice":
        return dice_loss(p, g, config.epsilon, config.per_image)
    if k == "weighted_dice":
        return weighted_dice_loss(p, g, config.class_weights, config.epsilon, config.per_image)
    if k == "tversky":
        return tversky_loss(p, g, config.alpha, config.beta, config.epsilon, config.per_image)
    return focal_tversky_loss(p, g, config.alpha, config.beta, config.gamma, config.epsilon, config.per_image)


def loss_gradient(config: LossConfig, p, g) -> np.ndarray:
    """Analytic gradient of the loss with respect to the probability map (float64)."""
    pt = torch.tensor(np.asarray(p, dtype=np.float64), requires_grad=True)
    gt = torch.as_tensor(np.asarray(g, dtype=np.float64))
    compute_loss(config, pt, gt).backward()
    return pt.grad.numpy()


def check_gradients(kind: str, config: LossConfig | None, p, g, step: float = 1e-5) -> float:
    """Max relative error of the analytic gradient against central finite differences."""
    config = LossConfig(kind=kind) if config is None else LossConfig(**{**config.to_dict(), "kind": kind})
    p = np.asarray(p, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    analytic = loss_gradient(config, p, g)

    def f(x):
        with torch.no_grad():
            return float(compute_loss(config, torch.as_tensor(x), torch.as_tensor(g)))

    numeric = np.empty_like(p)
    x = p.copy()
    for idx in np.ndindex(p.shape):
        orig = x[idx]
        x[idx] = orig + step
        hi = f(x)
        x[idx] = orig - step
        lo = f(x)
        x[idx] = orig
        numeric[idx] = (hi - lo) / (2 * step)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))
