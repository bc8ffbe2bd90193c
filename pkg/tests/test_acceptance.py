"""Acceptance criteria 1-9. Each test prints one ``[ACCEPT n] PASS|FAIL`` line with its measurements."""

import time

import numpy as np
import pytest
import torch

from bldseg.cli import main
from bldseg.config import ModelConfig, TrainConfig
from bldseg.losses import LossConfig, check_gradients, dice_loss, focal_tversky_loss, tversky_loss
from bldseg.metrics import (
    ConfusionCounts,
    MetricReport,
    check_report,
    confusion,
    implied_background_iou,
    iou,
    make_report,
    merge,
    miou,
)
from bldseg.models import DecoderSpec, build_model, encoder_spec, forward, load_checkpoint, save_checkpoint
from bldseg.raster import DatasetManifest
from bldseg.toy import make_toy_dataset
from bldseg.trainer import evaluate, model_from_config, train
from bldseg.tta import TtaVariant, apply_forward, forward_geometry, invert_prediction, preset, tta_predict

from .conftest import write_config

# tolerances and thresholds pinned by the acceptance criteria
IDENTITY_TOL = 1e-12
IDENTITY_PAIRS = 100
IDENTITY_BUDGET_S = 1.0
GRAD_TOL = 1e-4
GRAD_STEP = 1e-5
GRAD_BUDGET_S = 30.0
GRAD_P_RANGE = (0.05, 0.95)
IOU_PAIRS = 50
IOU_SIDE = 32
RF_VGG16 = 212
RF_RESNET50 = 483
RESCALE_MAE = 0.02
PRESET_SIZES = {"method1": 12, "method2": 48, "method3": 12}
DESK_TRAIN, DESK_TEST, DESK_SIZE, DESK_SEED = 200, 50, 64, 7
DESK_WIDTH, DESK_BATCH, DESK_LR, DESK_EPOCHS = 1 / 8, 8, 1e-4, 20
DESK_MIN_BUILDING_IOU = 0.85
DESK_BUDGET_S = 15 * 60
REPORT_TOL = 1e-12
TABLE1 = {"building": 0.811, "miou": 0.701, "background": 0.591}

EMITTED_REPORTS: list[MetricReport] = []


@pytest.fixture
def verdict(capsys):
    def say(n: int, title: str, ok: bool, detail: str = ""):
        with capsys.disabled():
            print(f"\n[ACCEPT {n}] {'PASS' if ok else 'FAIL'}  {title}  {detail}".rstrip())
        assert ok, f"criterion {n} ({title}) failed: {detail}"

    return say


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    """Train the desk-scale configuration once; criteria 6, 7 and 9 read from it."""
    root = tmp_path_factory.mktemp("desk")
    paths = make_toy_dataset(root, DESK_TRAIN, DESK_TEST, DESK_SIZE, DESK_SEED)
    manifest = DatasetManifest.load(paths["manifest"])
    config = TrainConfig(
        batch_size=DESK_BATCH, learning_rate=DESK_LR, max_epochs=DESK_EPOCHS, seed=0, loss=LossConfig("weighted_dice")
    )
    model = model_from_config(ModelConfig(width_multiplier=DESK_WIDTH), manifest.normalization, seed=0)
    t0 = time.perf_counter()
    best, history = train(model, manifest, config, root / "run")
    elapsed = time.perf_counter() - t0
    return {"paths": paths, "manifest": manifest, "best": best, "history": history, "elapsed": elapsed}


def test_1_loss_identities(verdict):
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    worst, bitwise = 0.0, True
    for _ in range(IDENTITY_PAIRS):
        n = int(rng.integers(4, 257))
        p = rng.uniform(0, 1, n)
        g = (rng.random(n) > 0.5).astype(np.float64)
        if p.sum() + g.sum() == 0:
            continue
        worst = max(worst, abs(float(tversky_loss(p, g, 0.5, 0.5, 0.0)) - float(dice_loss(p, g, 0.0))))
        a = rng.uniform(0, 1)
        b = 1 - a
        bitwise &= torch.equal(focal_tversky_loss(p, g, a, b, 1.0), tversky_loss(p, g, a, b))
    elapsed = time.perf_counter() - t0
    ok = worst < IDENTITY_TOL and bitwise and elapsed < IDENTITY_BUDGET_S
    verdict(1, "loss identities", ok, f"max|tversky-dice|={worst:.2e} focal(g=1)==tversky:{bitwise} t={elapsed:.3f}s")


def test_2_gradient_checks(verdict):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    errors = {}
    for kind in ("dice", "weighted_dice", "tversky", "focal_tversky"):
        p = rng.uniform(*GRAD_P_RANGE, (8, 8))
        g = (rng.random((8, 8)) > 0.5).astype(np.float64)
        cfg = LossConfig(kind, alpha=0.4, beta=0.6, gamma=2.0) if "tversky" in kind else LossConfig(kind)
        errors[kind] = check_gradients(kind, cfg, p, g, step=GRAD_STEP)
    elapsed = time.perf_counter() - t0
    ok = max(errors.values()) < GRAD_TOL and elapsed < GRAD_BUDGET_S
    detail = " ".join(f"{k}={v:.1e}" for k, v in errors.items())
    verdict(2, "gradient checks", ok, f"{detail} t={elapsed:.2f}s")


def _nested_loop(pred, gt):
    out = {}
    for cls, name in ((1, "building"), (0, "background")):
        inter = union = 0
        for i in range(pred.shape[0]):
            for j in range(pred.shape[1]):
                a, b = pred[i, j] == cls, gt[i, j] == cls
                inter += int(a and b)
                union += int(a or b)
        out[name] = 1.0 if union == 0 else inter / union
    return out


def test_3_iou_oracle(verdict):
    rng = np.random.default_rng(2)
    exact, merged_ok = True, True
    preds, gts = [], []
    for _ in range(IOU_PAIRS):
        density = rng.uniform(0.05, 0.95)
        pred = (rng.random((IOU_SIDE, IOU_SIDE)) < density).astype(np.uint8)
        gt = (rng.random((IOU_SIDE, IOU_SIDE)) < density).astype(np.uint8)
        preds.append(pred)
        gts.append(gt)
        c = confusion(pred, gt)
        oracle = _nested_loop(pred, gt)
        exact &= iou(c, "building") == oracle["building"] and iou(c, "background") == oracle["background"]
        exact &= miou(c) == (oracle["building"] + oracle["background"]) / 2
    whole = confusion(np.stack(preds), np.stack(gts))
    for _ in range(20):
        labels = rng.integers(0, int(rng.integers(1, 8)), IOU_PAIRS)
        parts = [merge(confusion(preds[i], gts[i]) for i in np.flatnonzero(labels == k)) for k in np.unique(labels)]
        merged_ok &= merge(rng.permutation(np.array(parts, dtype=object)).tolist()) == whole
    verdict(3, "IoU oracle equivalence", exact and merged_ok, f"oracle-exact:{exact} partition-merge-exact:{merged_ok}")


def test_4_receptive_field(verdict, capsys):
    values = {}
    for enc in ("vgg16", "resnet50"):
        code = main(["rf", "--encoder", enc])
        values[enc] = (code, int(capsys.readouterr().out.strip().splitlines()[-1].split()[-1]))
    ok = values["vgg16"] == (0, RF_VGG16) and values["resnet50"] == (0, RF_RESNET50)
    verdict(4, "receptive field", ok, f"vgg16={values['vgg16'][1]} resnet50={values['resnet50'][1]}")


def test_5_tta_roundtrips(verdict):
    g = torch.Generator().manual_seed(3)
    perm_ok = True
    for hflip in (False, True):
        for deg in (0, 90, 180):
            v = TtaVariant(hflip=hflip, degrees=deg)
            for _ in range(5):
                m = torch.rand(2, 1, 24, 40, generator=g)
                perm_ok &= torch.equal(invert_prediction(forward_geometry(m, v), v, (24, 40)), m)

    y, x = np.mgrid[0:512, 0:512] / 512
    smooth = torch.tensor(0.5 + 0.2 * np.sin(2 * np.pi * 2 * x) * np.cos(2 * np.pi * 3 * y), dtype=torch.float32)
    smooth = smooth[None, None].repeat(1, 3, 1, 1)
    half = TtaVariant(scale=0.5)
    down = apply_forward(smooth, half, multiple=32)
    mae = float((invert_prediction(down, half, (512, 512)) - smooth).abs().mean())

    model = build_model(encoder_spec("vgg", 16, 0.125), DecoderSpec("unetpp"), seed=0)
    batch = torch.randn(2, 3, 64, 64, generator=g)
    ident_ok = torch.equal(tta_predict(model, batch, preset("identity")), forward(model, batch))
    sizes = {k: len(preset(k)) for k in PRESET_SIZES}

    ok = perm_ok and tuple(down.shape[-2:]) == (256, 256) and mae < RESCALE_MAE and ident_ok and sizes == PRESET_SIZES
    verdict(5, "TTA round-trips", ok, f"perm-exact:{perm_ok} rescale-MAE={mae:.4f} identity-exact:{ident_ok} sizes={sizes}")


@pytest.mark.slow
def test_6_desk_training(verdict, desk):
    report = evaluate(desk["best"], desk["manifest"], "test")
    EMITTED_REPORTS.append(report)
    b = report.iou["building"]
    epochs = len(desk["history"].rows)
    ok = b >= DESK_MIN_BUILDING_IOU and desk["elapsed"] < DESK_BUDGET_S and epochs <= DESK_EPOCHS
    verdict(
        6,
        "desk-scale training",
        ok,
        f"test building IoU={b:.4f} mIoU={report.miou:.4f} epochs={epochs} best={desk['history'].best_epoch} "
        f"train-time={desk['elapsed']:.0f}s",
    )


@pytest.mark.slow
def test_7_tta_benefit(verdict, desk):
    zoomed = DatasetManifest.load(desk["paths"]["zoomed"])
    model, _ = load_checkpoint(desk["best"])
    base = evaluate(model, zoomed, "test")
    m3 = evaluate(model, zoomed, "test", preset("method3"))
    ms = evaluate(model, zoomed, "test", preset("multiscale"))
    EMITTED_REPORTS.extend([base, m3, ms])
    d3, dms = m3.miou - base.miou, ms.miou - base.miou
    verdict(7, "TTA benefit", d3 >= 0 and dms >= 0, f"no-TTA mIoU={base.miou:.4f} dmIoU method3={d3:+.4f} multiscale={dms:+.4f}")


def test_8_determinism(verdict, tiny_toy, tmp_path):
    cfg = write_config(tmp_path / "cfg.json", tiny_toy["manifest"], max_epochs=2)
    for run in ("a", "b"):
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / run)]) == 0
    same_history = (tmp_path / "a" / "history.csv").read_bytes() == (tmp_path / "b" / "history.csv").read_bytes()

    manifest = DatasetManifest.load(tiny_toy["manifest"])
    model, _ = load_checkpoint(tmp_path / "a" / "best.ckpt")
    before = evaluate(model, manifest, "test")
    copy = save_checkpoint(model, tmp_path / "copy.ckpt")
    after = evaluate(load_checkpoint(copy)[0], manifest, "test")
    EMITTED_REPORTS.extend([before, after])
    same_report = before.to_dict() == after.to_dict()
    verdict(8, "determinism", same_history and same_report, f"history-identical:{same_history} report-identical:{same_report}")


def test_9_report_consistency(verdict):
    bg = implied_background_iou(TABLE1["building"], TABLE1["miou"])
    b_union, g_union = 409_000, 189_000
    tp_b, tp_g = round(TABLE1["building"] * b_union), round(TABLE1["background"] * g_union)
    errors = b_union - tp_b
    counts = ConfusionCounts.from_building(tp_b, errors // 2, errors - errors // 2, tp_g)
    table1 = make_report(counts)
    check_report(table1, REPORT_TOL)
    table1_ok = (
        abs(bg - TABLE1["background"]) < REPORT_TOL
        and abs(table1.iou["building"] - TABLE1["building"]) < REPORT_TOL
        and abs(table1.miou - TABLE1["miou"]) < REPORT_TOL
    )
    emitted = EMITTED_REPORTS + [table1]
    gaps = [abs(r.miou - sum(r.iou.values()) / len(r.iou)) for r in emitted]
    for r in emitted:
        check_report(r, REPORT_TOL)
    ok = table1_ok and max(gaps) <= REPORT_TOL
    verdict(9, "report consistency", ok, f"reports checked={len(emitted)} max gap={max(gaps):.1e} implied background={bg:.3f}")
