"""Synthetic building scenes: bright axis-aligned rectangles on a textured background.

A second "zoomed" test set renders the same kind of scene at twice the ground resolution
(objects twice as large in pixels), mimicking a model trained on coarser imagery and
tested on finer imagery.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from scipy import ndimage

from .raster import RasterScene, assign_validation, build_manifest, tile_scene

GROUND, VEGETATION, BUILDING = 0, 3, 7
CLASS_MAP = {str(GROUND): "not-building", str(VEGETATION): "not-building", str(BUILDING): "building"}


def _smooth_noise(rng, size: int, cell: float) -> np.ndarray:
    coarse = rng.random((max(2, int(np.ceil(size / cell))) + 1,) * 2)
    field = ndimage.zoom(coarse, size / (coarse.shape[0] - 1), order=1)[:size, :size]
    return (field - field.min()) / max(np.ptp(field), 1e-9)


def render_scene(rng: np.random.Generator, size: int = 64, zoom: float = 1.0, scene_id: str = "toy") -> RasterScene:
    """One synthetic scene; ``zoom`` scales every object (and texture) size in pixels."""
    base = np.array([95.0, 105.0, 80.0]) + rng.uniform(-15, 15, 3)
    texture = _smooth_noise(rng, size, 12 * zoom)
    image = base + 50 * (texture[..., None] - 0.5) + rng.normal(0, 6, (size, size, 3))
    labels = np.full((size, size), GROUND, dtype=np.int64)

    veg = _smooth_noise(rng, size, 20 * zoom) > 0.7
    labels[veg] = VEGETATION
    image[veg] = image[veg] * np.array([0.7, 0.95, 0.6])

    for _ in range(rng.integers(1, 5)):
        h = int(round(rng.integers(6, 21) * zoom))
        w = int(round(rng.integers(6, 21) * zoom))
        r = int(rng.integers(0, size - h + 1))
        c = int(rng.integers(0, size - w + 1))
        roof = rng.uniform(175, 240) + rng.uniform(-12, 12, 3)
        image[r : r + h, c : c + w] = roof + rng.normal(0, 5, (h, w, 3))
        labels[r : r + h, c : c + w] = BUILDING

    image = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    return RasterScene(image=image, labels=labels, scene_id=scene_id, resolution_m=0.6 / zoom)


def make_toy_dataset(
    out_dir: str | os.PathLike,
    n_train: int = 200,
    n_test: int = 50,
    size: int = 64,
    seed: int = 7,
    val_fraction: float = 0.1,
    zoomed_test: bool = True,
) -> dict[str, Path]:
    """Write tiles plus ``manifest.json`` (train/val/test) and ``manifest_zoomed.json`` (test at 2x zoom)."""
    out = Path(out_dir)
    tiles = []
    for split, n, code in (("train", n_train, 0), ("test", n_test, 1)):
        for i in range(n):
            rng = np.random.default_rng([seed, code, i])
            scene = render_scene(rng, size, 1.0, f"toy-{split}-{i:04d}")
            tiles += tile_scene(scene, size, size, building_ids=(BUILDING,), split=split)
    assign_validation(tiles, val_fraction, seed)
    meta = {"generator": "toy", "seed": seed, "size": size, "val_policy": f"{val_fraction:g} of train scenes"}
    paths = {}
    build_manifest(tiles, out, size, class_map=CLASS_MAP, metadata=meta)
    paths["manifest"] = out / "manifest.json"
    if zoomed_test:
        zoomed = []
        for i in range(n_test):
            rng = np.random.default_rng([seed, 2, i])
            scene = render_scene(rng, 2 * size, 2.0, f"toy-zoomed-{i:04d}")
            zoomed += tile_scene(scene, 2 * size, 2 * size, building_ids=(BUILDING,), split="test")
        build_manifest(
            zoomed, out, 2 * size, class_map=CLASS_MAP, metadata={**meta, "zoom": 2.0}, filename="manifest_zoomed.json"
        )
        paths["zoomed"] = out / "manifest_zoomed.json"
    return paths
