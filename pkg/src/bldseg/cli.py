"""Command-line entry point: ``bldseg <command> ...`` (see ``bldseg --help``)."""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .config import ConfigError, load_config
from .metrics import MetricReport, check_report, confusion, make_report, merge
from .models import (
    CheckpointError,
    channel_mean,
    encoder_spec,
    extract_stage_activations,
    load_checkpoint,
    parse_encoder_name,
)
from .models.core import build_model
from .models.decoders import DecoderSpec
from .raster import (
    DatasetManifest,
    ManifestError,
    NormalizationSpec,
    SizingError,
    assign_validation,
    build_manifest,
    compute_dataset_stats,
    find_scenes,
    normalize,
    read_mask_png,
    read_scene,
    tile_scene,
)
from .toy import make_toy_dataset
from .trainer import TrainingError, evaluate, model_from_config, predict_proba, train
from .tta import TtaError, TtaPlan, preset
from .viz import activation_grid, augmentation_preview, overlay, save_png, tta_panel

logger = logging.getLogger("bldseg")

USAGE_ERRORS = (ConfigError, ManifestError, SizingError, CheckpointError, TtaError, FileNotFoundError, ValueError)


@contextlib.contextmanager
def staged(path: Path, directory: bool):
    """Write into a sibling temp path and move it into place only on success."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.partial")
    if tmp.exists():
        shutil.rmtree(tmp) if tmp.is_dir() else tmp.unlink()
    if directory:
        tmp.mkdir(parents=True)
    else:
        tmp.parent.mkdir(parents=True, exist_ok=True)
    try:
        yield tmp
    except BaseException:
        if tmp.exists():
            shutil.rmtree(tmp) if tmp.is_dir() else tmp.unlink()
        raise
    if path.exists() and path.is_dir():
        shutil.rmtree(path)
    os.replace(tmp, path)


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _tta_plan(args) -> TtaPlan | None:
    if getattr(args, "plan", None):
        return TtaPlan.from_dict(json.loads(Path(args.plan).read_text()))
    name = getattr(args, "tta", None) or getattr(args, "preset", None)
    return preset(name) if name else None


# ---------------------------------------------------------------------------
# commands


def cmd_tile(args) -> int:
    pairs = find_scenes(args.scene_dir)
    if not pairs:
        raise ManifestError(f"no image/label pairs found in {args.scene_dir}")
    building_ids = [int(x) for x in args.building_ids.split(",")]
    stride = args.stride or args.tile_size
    tiles, resolutions = [], {}
    for image_path, label_path in pairs:
        scene = read_scene(image_path, label_path, args.resolution)
        tiles += tile_scene(scene, args.tile_size, stride, building_ids, clamp=not args.no_clamp, split=args.split)
        resolutions[scene.scene_id] = scene.resolution_m
    if args.split == "train":
        assign_validation(tiles, args.val_fraction, args.seed)
    with staged(Path(args.out), directory=True) as tmp:
        build_manifest(
            tiles,
            tmp,
            args.tile_size,
            class_map={str(i): "building" for i in building_ids},
            metadata={"stride": stride, "resolution_m": resolutions, "val_fraction": args.val_fraction},
        )
    print(f"wrote {len(tiles)} tiles from {len(pairs)} scenes to {args.out}")
    return 0


def cmd_stats(args) -> int:
    manifest = DatasetManifest.load(args.manifest)
    stats = compute_dataset_stats(manifest, args.split)
    text = json.dumps(stats, indent=2)
    print(text)
    if args.out:
        with staged(Path(args.out), directory=False) as tmp:
            tmp.write_text(text + "\n")
    return 0


def cmd_make_toy(args) -> int:
    with staged(Path(args.out), directory=True) as tmp:
        make_toy_dataset(tmp, args.tiles, args.test_tiles, args.size, args.seed, args.val_fraction, not args.no_zoomed)
    print(f"wrote toy dataset ({args.tiles} train / {args.test_tiles} test tiles of {args.size}px) to {args.out}")
    return 0


def _resolve(path: str, base: Path) -> Path:
    p = Path(path)
    if p.is_absolute() or p.exists():
        return p
    return base / p


def cmd_train(args) -> int:
    config = load_config(args.config)
    if args.max_epochs is not None:
        from dataclasses import replace

        config = replace(config, trainer=replace(config.trainer, max_epochs=args.max_epochs))
    manifest_path = Path(args.manifest) if args.manifest else _resolve(config.data.manifest, Path(args.config).parent)
    manifest = DatasetManifest.load(manifest_path)
    if not manifest.records("train") or not manifest.records("val"):
        raise ConfigError(f"data.manifest: {manifest_path} needs non-empty train and val splits")
    out = Path(args.out)
    fresh = not (args.resume and (out / "last.ckpt").exists())
    if fresh and out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        config_hash = config.config_hash()
        _write_json(out / "config.json", {**config.to_dict(), "config_hash": config_hash})
        if args.aug_preview and config.trainer.augmentation is not None:
            imgs, msks, _ = manifest.load_split("train")
            save_png(augmentation_preview(imgs[:4], msks[:4], config.trainer.augmentation, config.trainer.seed), args.aug_preview)
        model = model_from_config(config.model, manifest.normalization, seed=config.trainer.seed)
        best, history = train(model, manifest, config.trainer, out, config_hash=config_hash, resume=args.resume)
    except BaseException:
        # keep partial runs that completed an epoch: they are resumable
        if fresh and not (out / "last.ckpt").exists():
            shutil.rmtree(out, ignore_errors=True)
        raise
    best_row = next(r for r in history.rows if r.epoch == history.best_epoch)
    print(
        f"trained {len(history.rows)} epochs; best epoch {best_row.epoch} "
        f"val mIoU {best_row.val_miou:.4f} building IoU {best_row.val_building_iou:.4f}; checkpoint {best}"
    )
    return 0


def cmd_predict(args) -> int:
    model, _ = load_checkpoint(args.model)
    manifest = DatasetManifest.load(args.manifest)
    images, _, names = manifest.load_split(args.split)
    if not names:
        raise ConfigError(f"split {args.split!r} is empty")
    probs = predict_proba(model, images, args.batch_size, _tta_plan(args))
    with staged(Path(args.out), directory=True) as tmp:
        for name, p in zip(names, probs):
            Image.fromarray(((p >= args.threshold) * 255).astype(np.uint8)).save(tmp / f"{name}.png")
            if args.save_proba:
                np.save(tmp / f"{name}_proba.npy", p)
    print(f"wrote {len(names)} masks to {args.out}")
    return 0


def _gt_lookup(args) -> dict[str, Path]:
    if args.gt_dir:
        return {p.stem: p for p in sorted(Path(args.gt_dir).glob("*.png"))}
    manifest = DatasetManifest.load(args.manifest)
    return {r["name"]: manifest.root / r["mask"] for r in manifest.records(args.split)}


def _append_csv(path: str, report: MetricReport, label: str) -> None:
    p = Path(path)
    new = not p.exists()
    with open(p, "a", newline="") as f:
        w = csv.writer(f)
        if new:
            w.writerow(["run", "building_iou", "background_iou", "miou", "pixels", "aggregation"])
        w.writerow([label, report.iou.get("building"), report.iou.get("background"), report.miou, report.pixels,
                    report.fingerprint.get("aggregation")])


def cmd_evaluate(args) -> int:
    if args.pred_dir:
        if not (args.gt_dir or args.manifest):
            raise ConfigError("--pred-dir needs --gt-dir or --manifest")
        gt = _gt_lookup(args)
        preds = sorted(Path(args.pred_dir).glob("*.png"))
        if not preds:
            raise ConfigError(f"no prediction masks in {args.pred_dir}")
        counts = []
        for p in preds:
            if p.stem not in gt:
                raise ConfigError(f"no ground truth for prediction {p.name}")
            counts.append(confusion(read_mask_png(p), read_mask_png(gt[p.stem])))
        report = make_report(
            counts if args.aggregation == "macro" else merge(counts),
            aggregation=args.aggregation,
            source="masks",
            images=len(counts),
        )
    else:
        if not (args.model and args.manifest):
            raise ConfigError("evaluate needs --model and --manifest, or --pred-dir")
        report = evaluate(args.model, DatasetManifest.load(args.manifest), args.split, _tta_plan(args), args.threshold,
                          args.aggregation)
    check_report(report)
    with staged(Path(args.out), directory=False) as tmp:
        report.save(tmp)
    if args.csv:
        _append_csv(args.csv, report, Path(args.out).stem)
    print(f"building IoU {report.iou['building']:.4f}  mIoU {report.miou:.4f}  -> {args.out}")
    return 0


def cmd_tta_evaluate(args) -> int:
    plan = _tta_plan(args)
    if plan is None:
        raise ConfigError("tta-evaluate needs --preset or --plan")
    model, _ = load_checkpoint(args.model)
    manifest = DatasetManifest.load(args.manifest)
    base = evaluate(model, manifest, args.split, None, args.threshold, args.aggregation)
    with_tta = evaluate(model, manifest, args.split, plan, args.threshold, args.aggregation)
    payload = {
        "no_tta": base.to_dict(),
        "tta": with_tta.to_dict(),
        "delta_miou": with_tta.miou - base.miou,
        "delta_building_iou": with_tta.iou["building"] - base.iou["building"],
        "variants": len(plan),
    }
    with staged(Path(args.out), directory=False) as tmp:
        _write_json(tmp, payload)
    print(
        f"no TTA mIoU {base.miou:.4f} | TTA ({len(plan)} variants) mIoU {with_tta.miou:.4f} | "
        f"delta {payload['delta_miou']:+.4f}"
    )
    return 0


def cmd_rf(args) -> int:
    family, variant = parse_encoder_name(args.encoder)
    spec = encoder_spec(family, variant)
    print(f"{'stage':<10}{'layers':>8}{'stride':>8}{'receptive field':>18}")
    for row in spec.rf_table():
        print(f"{row['stage']:<10}{row['layers']:>8}{row['stride']:>8}{row['receptive_field']:>18}")
    print(f"receptive field: {spec.rf_table()[-1]['receptive_field']}")
    return 0


def cmd_visualize_overlay(args) -> int:
    model, _ = load_checkpoint(args.model)
    manifest = DatasetManifest.load(args.manifest)
    images, masks, names = manifest.load_split(args.split)
    images, masks, names = images[: args.limit], masks[: args.limit], names[: args.limit]
    plan = _tta_plan(args)
    probs = predict_proba(model, images, tta_plan=None)
    tta_probs = predict_proba(model, images, tta_plan=plan) if plan else None
    with staged(Path(args.out), directory=True) as tmp:
        for i, name in enumerate(names):
            pred = (probs[i] >= args.threshold).astype(np.uint8)
            save_png(overlay(images[i], pred, args.alpha), tmp / f"overlay_{name}.png")
            if tta_probs is not None:
                after = (tta_probs[i] >= args.threshold).astype(np.uint8)
                save_png(tta_panel(images[i], masks[i], pred, after), tmp / f"tta_{name}.png")
    print(f"wrote {len(names)} overlays to {args.out}")
    return 0


def cmd_visualize_activations(args) -> int:
    if args.model:
        model, _ = load_checkpoint(args.model)
    else:
        family, variant = parse_encoder_name(args.encoder)
        model = build_model(encoder_spec(family, variant, args.width), DecoderSpec("unetpp"), seed=args.seed)
    if args.image:
        image = np.asarray(Image.open(args.image).convert("RGB"))
    elif args.manifest:
        manifest = DatasetManifest.load(args.manifest)
        recs = manifest.records(args.split)
        image, _ = manifest.load_record(recs[args.index])
    else:
        raise ConfigError("visualize-activations needs --image or --manifest")
    acts = extract_stage_activations(model, normalize(image, model.normalization or NormalizationSpec()))
    maps = [channel_mean(a) for a in acts]
    with staged(Path(args.out), directory=True) as tmp:
        save_png(activation_grid(maps), tmp / "activations.png")
        for k, (a, m) in enumerate(zip(acts, maps), start=1):
            save_png((np.clip(np.rint(m * 255), 0, 255)).astype(np.uint8), tmp / f"stage{k}_{a.shape[-1]}px.png")
    print(f"wrote {len(maps)} stage maps to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bldseg", description="Building-footprint segmentation toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tile", help="cut scenes (image + <stem>_label.png) into tiles and write a manifest")
    p.add_argument("--scene-dir", required=True)
    p.add_argument("--tile-size", type=int, default=512)
    p.add_argument("--stride", type=int, default=None, help="defaults to the tile size")
    p.add_argument("--out", required=True)
    p.add_argument("--building-ids", default="1", help="comma-separated label ids that count as building")
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--resolution", type=float, default=None, help="metres per pixel (metadata only)")
    p.add_argument("--no-clamp", action="store_true", help="drop border windows instead of clamping to the edge")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("stats", help="per-channel mean/std of normalized tiles")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("make-toy-dataset", help="write the synthetic rectangles dataset")
    p.add_argument("--tiles", type=int, default=200, help="training tiles (validation is carved from these)")
    p.add_argument("--test-tiles", type=int, default=50)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--no-zoomed", action="store_true", help="skip the 2x zoomed test set")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_toy)

    p = sub.add_parser("train", help="train a model from an experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest", default=None, help="override data.manifest")
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--resume", action="store_true", help="continue from <out>/last.ckpt")
    p.add_argument("--aug-preview", default=None, metavar="PNG", help="render a grid of augmented samples")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write binary mask PNGs for a manifest split")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--tta", default=None, help="TTA preset name")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--save-proba", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="IoU/mIoU report from a model or from mask directories")
    p.add_argument("--model", default=None)
    p.add_argument("--manifest", default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--pred-dir", default=None)
    p.add_argument("--gt-dir", default=None)
    p.add_argument("--tta", default=None, help="TTA preset name")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--aggregation", choices=("micro", "macro"), default="micro")
    p.add_argument("--csv", default=None, help="append a summary row to this CSV")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("tta-evaluate", help="side-by-side reports without and with test-time augmentation")
    p.add_argument("--model", required=True)
    p.add_argument("--preset", default=None, choices=("method1", "method2", "method3", "multiscale", "identity"))
    p.add_argument("--plan", default=None, help="JSON file with hflip/rotations/scales/multipliers")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--aggregation", choices=("micro", "macro"), default="micro")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tta_evaluate)

    p = sub.add_parser("rf", help="receptive field per encoder stage")
    p.add_argument("--encoder", required=True, help="e.g. vgg16, resnet50, efficientnet-b0, mobilenetv2")
    p.set_defaults(func=cmd_rf)

    p = sub.add_parser("visualize-overlay", help="predicted masks tinted over the RGB tiles")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--limit", type=int, default=8)
    p.add_argument("--alpha", type=float, default=0.4)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--tta", default=None, help="also write before/after TTA panels for this preset")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_visualize_overlay)

    p = sub.add_parser("visualize-activations", help="channel-mean map per encoder stage")
    p.add_argument("--model", default=None, help="checkpoint; omit to use a randomly initialised --encoder")
    p.add_argument("--encoder", default="vgg16")
    p.add_argument("--width", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image", default=None)
    p.add_argument("--manifest", default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_visualize_activations)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except USAGE_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except TrainingError as e:
        print(f"training failed: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
