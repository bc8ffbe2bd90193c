"""Raster ingestion: scene tiling, label binarization, normalization and manifests."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class SizingError(ValueError):
    """Scene or tile geometry is inconsistent."""


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class NormalizationSpec:
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ValueError("mean and std need exactly 3 channel values")
        if any(not (0.0 <= m <= 1.0) for m in self.mean):
            raise ValueError(f"mean values must lie in [0, 1], got {self.mean}")
        if any(s <= 0 for s in self.std):
            raise ValueError(f"std values must be positive, got {self.std}")
        object.__setattr__(self, "mean", tuple(float(m) for m in self.mean))
        object.__setattr__(self, "std", tuple(float(s) for s in self.std))

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationSpec":
        return cls(tuple(d["mean"]), tuple(d["std"]))


@dataclass
class RasterScene:
    image: np.ndarray
    labels: np.ndarray
    scene_id: str
    resolution_m: float | None = None

    def __post_init__(self):
        self.image = np.asarray(self.image)
        self.labels = np.asarray(self.labels)
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise SizingError(f"scene {self.scene_id}: image must be H x W x 3, got {self.image.shape}")
        if self.image.dtype != np.uint8:
            raise TypeError(f"scene {self.scene_id}: image must be uint8, got {self.image.dtype}")
        if self.labels.shape != self.image.shape[:2]:
            raise SizingError(
                f"scene {self.scene_id}: labels {self.labels.shape} do not match image {self.image.shape[:2]}"
            )
        if self.resolution_m is not None and self.resolution_m <= 0:
            raise ValueError("resolution_m must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape


@dataclass
class TileSample:
    """One tile: image (raw uint8 H x W x 3 or normalized float 3 x T x T) and binary mask."""

    image: np.ndarray
    mask: np.ndarray
    origin: tuple[str, int, int]
    split: str = "train"

    def __post_init__(self):
        if self.mask.ndim != 2:
            raise SizingError(f"mask must be 2-D, got {self.mask.shape}")
        # uint8 tiles are channel-last, float tiles channel-first
        spatial = self.image.shape[:2] if self.image.dtype == np.uint8 else self.image.shape[-2:]
        if tuple(spatial) != self.mask.shape:
            raise SizingError(f"image {self.image.shape} and mask {self.mask.shape} disagree")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")

    @property
    def name(self) -> str:
        scene_id, row, col = self.origin
        return f"{scene_id}_r{row}_c{col}"


def window_offsets(length: int, tile_size: int, stride: int, clamp: bool = True) -> list[int]:
    """Start offsets along one axis; with ``clamp`` the last window is pinned to the edge."""
    if stride < 1:
        raise SizingError(f"stride must be >= 1, got {stride}")
    if tile_size > length:
        raise SizingError(f"tile size {tile_size} exceeds axis length {length}")
    offsets = list(range(0, length - tile_size + 1, stride))
    if clamp and offsets[-1] + tile_size < length:
        offsets.append(length - tile_size)
    return offsets


def binarize_labels(labels: np.ndarray, building_ids: Iterable[int]) -> np.ndarray:
    return np.isin(labels, list(building_ids)).astype(np.uint8)


def tile_scene(
    scene: RasterScene,
    tile_size: int = 512,
    stride: int | None = None,
    building_ids: Iterable[int] = (1,),
    clamp: bool = True,
    split: str = "train",
) -> list[TileSample]:
    """Cut a scene into ``tile_size`` windows (raw uint8 images, binary masks)."""
    stride = tile_size if stride is None else stride
    h, w = scene.shape
    if tile_size > min(h, w):
        raise SizingError(f"scene {scene.scene_id} is {h}x{w}, smaller than tile size {tile_size}")
    mask = binarize_labels(scene.labels, building_ids)
    tiles = []
    for r in window_offsets(h, tile_size, stride, clamp):
        for c in window_offsets(w, tile_size, stride, clamp):
            tiles.append(
                TileSample(
                    image=scene.image[r : r + tile_size, c : c + tile_size].copy(),
                    mask=mask[r : r + tile_size, c : c + tile_size].copy(),
                    origin=(scene.scene_id, r, c),
                    split=split,
                )
            )
    return tiles


def reassemble(tiles: Sequence[TileSample], shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Paste tiles back at their origins; later tiles overwrite earlier ones."""
    image = np.zeros((*shape, 3), dtype=np.uint8)
    mask = np.zeros(shape, dtype=np.uint8)
    for t in tiles:
        _, r, c = t.origin
        th, tw = t.mask.shape
        image[r : r + th, c : c + tw] = t.image
        mask[r : r + th, c : c + tw] = t.mask
    return image, mask


def normalize(image: np.ndarray, spec: NormalizationSpec = NormalizationSpec()) -> np.ndarray:
    """uint8 H x W x 3 (or batch) -> float32 channel-first normalized array."""
    x = np.asarray(image, dtype=np.float64) / 255.0
    x = (x - np.asarray(spec.mean)) / np.asarray(spec.std)
    return np.moveaxis(x, -1, -3).astype(np.float32)


def denormalize(x: np.ndarray, spec: NormalizationSpec = NormalizationSpec()) -> np.ndarray:
    """Inverse of :func:`normalize`, returning [0, 1]-scaled channel-last values."""
    x = np.moveaxis(np.asarray(x, dtype=np.float64), -3, -1)
    return x * np.asarray(spec.std) + np.asarray(spec.mean)


# ---------------------------------------------------------------------------
# dataset statistics


@dataclass
class ChannelMoments:
    """Mergeable per-channel count/sum/sum-of-squares accumulator."""

    count: int = 0
    total: np.ndarray = field(default_factory=lambda: np.zeros(3))
    total_sq: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def update(self, x: np.ndarray) -> "ChannelMoments":
        # x: 3 x H x W
        flat = x.reshape(3, -1).astype(np.float64)
        self.count += flat.shape[1]
        self.total = self.total + flat.sum(axis=1)
        self.total_sq = self.total_sq + (flat**2).sum(axis=1)
        return self

    def __add__(self, other: "ChannelMoments") -> "ChannelMoments":
        return ChannelMoments(self.count + other.count, self.total + other.total, self.total_sq + other.total_sq)

    @property
    def mean(self) -> np.ndarray:
        return self.total / self.count

    @property
    def std(self) -> np.ndarray:
        var = self.total_sq / self.count - self.mean**2
        return np.sqrt(np.maximum(var, 0.0))


def compute_dataset_stats(manifest: "DatasetManifest", split: str = "train") -> dict:
    """Per-channel mean/std of the normalized tiles of one split."""
    records = manifest.records(split)
    if not records:
        raise ManifestError(f"manifest has no {split!r} tiles")
    moments = ChannelMoments()
    for rec in records:
        image, _ = manifest.load_record(rec)
        moments.update(normalize(image, manifest.normalization))
    mean, std = moments.mean, moments.std
    degenerate = bool(np.any(std < 1e-8))
    if degenerate:
        logger.warning("degenerate data: zero variance in channel(s) %s", np.flatnonzero(std < 1e-8).tolist())
    return {
        "split": split,
        "tiles": len(records),
        "pixels": moments.count,
        "mean": mean.tolist(),
        "std": std.tolist(),
        "degenerate": degenerate,
    }


# ---------------------------------------------------------------------------
# manifests and on-disk tiles


def _png_bytes(arr: np.ndarray) -> bytes:
    import io

    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def write_tile(tile: TileSample, root: Path) -> dict:
    """Store a tile as PNG image + PNG mask under a content-addressed path."""
    img_bytes = _png_bytes(np.ascontiguousarray(tile.image))
    mask_bytes = _png_bytes(np.ascontiguousarray(tile.mask.astype(np.uint8) * 255))
    digest = hashlib.sha1(img_bytes + mask_bytes).hexdigest()[:20]
    rel_dir = Path("tiles") / digest[:2]
    (root / rel_dir).mkdir(parents=True, exist_ok=True)
    image_path = rel_dir / f"{digest}_image.png"
    mask_path = rel_dir / f"{digest}_mask.png"
    for rel, data in ((image_path, img_bytes), (mask_path, mask_bytes)):
        target = root / rel
        if not target.exists():
            target.write_bytes(data)
    scene_id, row, col = tile.origin
    return {
        "name": tile.name,
        "image": image_path.as_posix(),
        "mask": mask_path.as_posix(),
        "origin": [scene_id, int(row), int(col)],
        "split": tile.split,
    }


def read_mask_png(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path))
    if arr.ndim == 3:
        arr = arr[..., 0]
    return (arr > 127).astype(np.uint8) if arr.max() > 1 else arr.astype(np.uint8)


@dataclass
class DatasetManifest:
    tiles: list[dict]
    tile_size: int
    normalization: NormalizationSpec = field(default_factory=NormalizationSpec)
    class_map: dict[str, str] = field(default_factory=lambda: {"1": "building"})
    root: Path = Path(".")
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        seen: dict[str, str] = {}
        for rec in self.tiles:
            if rec["split"] not in SPLITS:
                raise ManifestError(f"tile {rec['name']}: unknown split {rec['split']!r}")
            prev = seen.setdefault(rec["name"], rec["split"])
            if prev != rec["split"]:
                raise ManifestError(f"tile {rec['name']} appears in both {prev!r} and {rec['split']!r}")

    @property
    def building_ids(self) -> list[int]:
        return sorted(int(k) for k, v in self.class_map.items() if v == "building")

    def records(self, split: str | None = None) -> list[dict]:
        return [r for r in self.tiles if split is None or r["split"] == split]

    def load_record(self, rec: dict) -> tuple[np.ndarray, np.ndarray]:
        image = np.asarray(Image.open(self.root / rec["image"]).convert("RGB"))
        mask = read_mask_png(self.root / rec["mask"])
        return image, mask

    def load_split(self, split: str) -> tuple[np.ndarray, np.ndarray, list[str]]:
        """Stack a split as (N x T x T x 3 uint8, N x T x T uint8, names)."""
        recs = self.records(split)
        if not recs:
            return (
                np.zeros((0, self.tile_size, self.tile_size, 3), np.uint8),
                np.zeros((0, self.tile_size, self.tile_size), np.uint8),
                [],
            )
        pairs = [self.load_record(r) for r in recs]
        return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs]), [r["name"] for r in recs]

    def to_dict(self) -> dict:
        return {
            "tile_size": self.tile_size,
            "normalization": self.normalization.to_dict(),
            "class_map": self.class_map,
            "metadata": self.metadata,
            "tiles": self.tiles,
        }

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        os.replace(tmp, path)
        return path

    @classmethod
    def load(cls, path: str | os.PathLike, check_files: bool = True) -> "DatasetManifest":
        path = Path(path)
        d = json.loads(path.read_text())
        m = cls(
            tiles=d["tiles"],
            tile_size=int(d["tile_size"]),
            normalization=NormalizationSpec.from_dict(d["normalization"]),
            class_map={str(k): v for k, v in d["class_map"].items()},
            root=path.parent,
            metadata=d.get("metadata", {}),
        )
        if check_files:
            for rec in m.tiles:
                for key in ("image", "mask"):
                    if not (m.root / rec[key]).exists():
                        raise ManifestError(f"tile {rec['name']}: missing {key} file {rec[key]}")
        return m


def assign_validation(tiles: list[TileSample], val_fraction: float = 0.1, seed: int = 0) -> list[TileSample]:
    """Move whole scenes from train to val until ~``val_fraction`` of train tiles are held out."""
    train = [t for t in tiles if t.split == "train"]
    if not train or val_fraction <= 0:
        return tiles
    scenes = sorted({t.origin[0] for t in train})
    rng = np.random.default_rng(seed)
    rng.shuffle(scenes)
    target = max(1, int(round(val_fraction * len(train))))
    per_scene: dict[str, int] = {}
    for t in train:
        per_scene[t.origin[0]] = per_scene.get(t.origin[0], 0) + 1
    chosen, held = set(), 0
    for s in scenes:
        if held >= target or len(chosen) == len(scenes) - 1:
            break
        chosen.add(s)
        held += per_scene[s]
    for t in train:
        if t.origin[0] in chosen:
            t.split = "val"
    return tiles


def build_manifest(
    tiles: Sequence[TileSample],
    out_dir: str | os.PathLike,
    tile_size: int,
    normalization: NormalizationSpec = NormalizationSpec(),
    class_map: dict[str, str] | None = None,
    metadata: dict | None = None,
    filename: str = "manifest.json",
) -> DatasetManifest:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = [write_tile(t, out_dir) for t in tiles]
    manifest = DatasetManifest(
        tiles=records,
        tile_size=tile_size,
        normalization=normalization,
        class_map=class_map or {"1": "building"},
        root=out_dir,
        metadata=metadata or {},
    )
    manifest.save(out_dir / filename)
    return manifest


# ---------------------------------------------------------------------------
# scene discovery


LABEL_SUFFIXES = ("_label.png", "_labels.png", "_mask.png")


def read_scene(image_path: str | os.PathLike, label_path: str | os.PathLike, resolution_m: float | None = None) -> RasterScene:
    image_path = Path(image_path)
    image = np.asarray(Image.open(image_path).convert("RGB"), dtype=np.uint8)
    labels = np.asarray(Image.open(label_path))
    if labels.ndim == 3:
        labels = labels[..., 0]
    return RasterScene(image=image, labels=labels.astype(np.int64), scene_id=image_path.stem, resolution_m=resolution_m)


def find_scenes(scene_dir: str | os.PathLike) -> list[tuple[Path, Path]]:
    """Pair every image (PNG/GeoTIFF) with its sidecar label PNG ``<stem>_label.png``."""
    scene_dir = Path(scene_dir)
    pairs = []
    for p in sorted(scene_dir.iterdir()):
        if p.suffix.lower() not in (".png", ".tif", ".tiff") or any(p.name.endswith(s) for s in LABEL_SUFFIXES):
            continue
        for suffix in LABEL_SUFFIXES:
            label = p.with_name(p.stem + suffix)
            if label.exists():
                pairs.append((p, label))
                break
        else:
            logger.warning("no label raster for %s; skipped", p.name)
    return pairs
