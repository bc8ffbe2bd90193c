"""Input checks for image/mask arrays, in the spirit of ``sklearn.utils.check_array``."""

from __future__ import annotations

import numpy as np


def check_images(X, multiple: int | None = None) -> np.ndarray:
    """Return ``X`` as a uint8 N x H x W x 3 array; a single H x W x 3 image gains a batch axis."""
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"expected images shaped (n, height, width, 3), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("found an empty image array")
    if X.dtype != np.uint8:
        if np.issubdtype(X.dtype, np.floating):
            if not np.isfinite(X).all():
                raise ValueError("images contain NaN or infinity")
            if X.min() >= 0 and X.max() <= 1:
                X = np.rint(X * 255)
        if X.min() < 0 or X.max() > 255:
            raise ValueError("image values must lie in [0, 255] (or [0, 1] for floats)")
        X = X.astype(np.uint8)
    if multiple is not None:
        h, w = X.shape[1:3]
        if h % multiple or w % multiple:
            raise ValueError(f"image size {h}x{w} must be a multiple of {multiple}")
    return X


def check_masks(y, images: np.ndarray | None = None) -> np.ndarray:
    """Return ``y`` as a uint8 N x H x W array of 0/1 values matching ``images``."""
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[None]
    if y.ndim != 3:
        raise ValueError(f"expected masks shaped (n, height, width), got {y.shape}")
    if y.dtype == bool:
        y = y.astype(np.uint8)
    if not np.isin(y, (0, 1)).all():
        raise ValueError("masks must be binary (0/1)")
    if images is not None and y.shape != images.shape[:3]:
        raise ValueError(f"masks {y.shape} do not match images {images.shape[:3]}")
    return y.astype(np.uint8)
