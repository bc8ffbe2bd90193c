"""Static figure outputs: mask overlays, stage-activation grids, augmentation previews, TTA panels."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .augmentation import AugmentationPolicy, augment, sample_rng


def overlay(image: np.ndarray, mask: np.ndarray, alpha: float = 0.4, color=(255, 0, 0)) -> np.ndarray:
    """Tint building pixels of a uint8 RGB image."""
    if not (0.0 <= alpha <= 1.0):
        raise ValueError("alpha must lie in [0, 1]")
    out = image.astype(np.float64)
    m = np.asarray(mask).astype(bool)
    out[m] = (1 - alpha) * out[m] + alpha * np.asarray(color, dtype=np.float64)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def to_gray_rgb(values: np.ndarray) -> np.ndarray:
    """[0, 1] map -> uint8 H x W x 3."""
    v = np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    return np.repeat(v[..., None], 3, axis=-1)


def _resize(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if img.shape[:2] == size:
        return img
    return np.asarray(Image.fromarray(img).resize((size[1], size[0]), Image.NEAREST))


def grid(panels: Sequence[np.ndarray], columns: int | None = None, pad: int = 2, cell: tuple[int, int] | None = None) -> np.ndarray:
    """Lay uint8 RGB panels out on a white grid, nearest-resized to a common cell size."""
    if not panels:
        raise ValueError("no panels to lay out")
    cell = cell or max((p.shape[:2] for p in panels), key=lambda s: s[0] * s[1])
    columns = columns or len(panels)
    rows = -(-len(panels) // columns)
    h, w = cell
    canvas = np.full((rows * (h + pad) + pad, columns * (w + pad) + pad, 3), 255, dtype=np.uint8)
    for k, p in enumerate(panels):
        r, c = divmod(k, columns)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        canvas[y : y + h, x : x + w] = _resize(p, cell)
    return canvas


def activation_grid(maps: Sequence[np.ndarray], cell: int = 128) -> np.ndarray:
    """One panel per encoder stage from channel-mean maps in [0, 1]."""
    return grid([to_gray_rgb(m) for m in maps], cell=(cell, cell))


def augmentation_preview(
    images: np.ndarray, masks: np.ndarray, policy: AugmentationPolicy, seed: int = 0, epochs: Sequence[int] = (0, 10, 19)
) -> np.ndarray:
    """Rows: samples; columns: original then one augmented draw per epoch (mask overlaid)."""
    panels = []
    for i, (img, msk) in enumerate(zip(images, masks)):
        panels.append(overlay(img, msk))
        for e in epochs:
            a_img, a_msk, _, _ = augment(img, msk, policy, sample_rng(seed, e, i), e)
            panels.append(overlay(a_img, a_msk))
    return grid(panels, columns=1 + len(epochs))


def tta_panel(image: np.ndarray, gt: np.ndarray, before: np.ndarray, after: np.ndarray) -> np.ndarray:
    """image | ground truth | prediction without TTA | prediction with TTA."""
    return grid([image, overlay(image, gt, color=(0, 200, 0)), overlay(image, before), overlay(image, after)])


def save_png(arr: np.ndarray, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")
    return path
