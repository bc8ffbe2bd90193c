import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from bldseg.losses import LossConfig, compute_loss
from bldseg.models import (
    BuildError,
    CheckpointError,
    DecoderSpec,
    LayerConfig,
    PaddingError,
    build_model,
    channel_mean,
    count_parameters,
    encoder_spec,
    extract_stage_activations,
    forward,
    load_checkpoint,
    parse_encoder_name,
    receptive_field,
    save_checkpoint,
)
from bldseg.models.decoders import ASPP

FAMILIES = [("vgg", "16"), ("resnet", "18"), ("resnet", "50"), ("efficientnet", "b0"), ("mobilenet", "v2")]


def small(family="vgg", variant="16", decoder="unetpp", w=0.125, seed=0):
    return build_model(encoder_spec(family, variant, w), DecoderSpec(decoder), seed=seed)


# ---------------------------------------------------------------------------
# shape contract


@pytest.mark.slow
def test_unetpp_vgg16_full_width_shape():
    model = build_model(encoder_spec("vgg", 16, 1.0), DecoderSpec("unetpp"), seed=0)
    out = forward(model, torch.rand(1, 3, 512, 512))
    assert out.shape == (1, 1, 512, 512)
    assert float(out.min()) >= 0 and float(out.max()) <= 1


def test_deeplab_resnet18_shape():
    model = build_model(encoder_spec("resnet", 18, 1.0), DecoderSpec("deeplabv3plus"), seed=0)
    out = forward(model, torch.rand(1, 3, 256, 256))
    assert out.shape == (1, 1, 256, 256)
    assert float(out.min()) >= 0 and float(out.max()) <= 1


@pytest.mark.parametrize("family,variant", FAMILIES)
@pytest.mark.parametrize("decoder", ["unetpp", "deeplabv3plus"])
@pytest.mark.parametrize("size", [(64, 64), (32, 96)])
def test_output_matches_input_dims(family, variant, decoder, size):
    model = small(family, variant, decoder)
    out = forward(model, torch.randn(2, 3, *size))
    assert out.shape == (2, 1, *size)
    assert torch.isfinite(out).all() and out.min() >= 0 and out.max() <= 1


def _conv_bn(cin, cout, k):
    return k * k * cin * cout + 2 * cout  # bias-free conv + BN affine


def test_parameter_count_matches_arithmetic():
    c = [8, 16, 32, 64, 64]  # VGG-16 stage widths 64,128,256,512,512 at 1/8
    encoder = 0
    cin = 3
    for width, n in zip(c, (2, 2, 3, 3, 3)):
        for _ in range(n):
            encoder += _conv_bn(cin, width, 3)
            cin = width
    decoder = 0
    for j in range(1, 5):
        for i in range(5 - j):
            decoder += _conv_bn(c[i + 1], c[i], 3)  # upsample conv
            decoder += _conv_bn(c[i] * (j + 1), c[i], 3) + _conv_bn(c[i], c[i], 3)
    head = _conv_bn(8, 8, 3) + 8 + 1
    expected = encoder + decoder + head

    model = small("vgg", "16", "unetpp")
    assert count_parameters(model) == expected
    assert expected < 1_000_000


def test_forward_rejects_indivisible_dims():
    with pytest.raises(PaddingError, match="32"):
        forward(small(), torch.zeros(1, 3, 48, 64))


def test_duplicate_rows_identical():
    model = small("resnet", "18", "deeplabv3plus")
    x = torch.randn(1, 3, 64, 64)
    out = forward(model, torch.cat([x, x]))
    assert torch.equal(out[0], out[1])


def test_zero_input_finite():
    out = forward(small(), torch.zeros(1, 3, 64, 64))
    assert torch.isfinite(out).all() and out.min() >= 0 and out.max() <= 1


def test_build_is_seeded():
    a, b = small(seed=3), small(seed=3)
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)


def test_incompatible_nested_depth_rejected():
    with pytest.raises(BuildError, match="nested depth 4"):
        build_model(encoder_spec("vgg", 16, 0.125), DecoderSpec("unetpp", nested_depth=4))


def test_decoder_spec_validation():
    with pytest.raises(ValueError):
        DecoderSpec("deeplabv3plus", atrous_rates=(6, 6, 18))
    with pytest.raises(ValueError):
        DecoderSpec("deeplabv3plus", atrous_rates=(0, 6))
    with pytest.raises(ValueError):
        encoder_spec("vgg", 16, 0.0)


def test_parse_encoder_name():
    assert parse_encoder_name("vgg16") == ("vgg", "16")
    assert parse_encoder_name("efficientnet-b3") == ("efficientnet", "b3")


@pytest.mark.parametrize("family,variant", FAMILIES)
def test_encoder_stage_strides(family, variant):
    spec = encoder_spec(family, variant, 0.125)
    assert spec.stage_strides()[:4] == [2, 4, 8, 16]
    assert spec.stage_strides()[-1] == 32


# ---------------------------------------------------------------------------
# stage activations


def test_vgg16_stage_sizes():
    model = small()
    maps = extract_stage_activations(model, torch.randn(3, 512, 512))
    assert [m.shape[-1] for m in maps] == [256, 128, 64, 32, 16]
    assert len(maps) == len(model.encoder_spec.stages)


def test_constant_image_gives_constant_stage1():
    model = small()
    (first, *_) = extract_stage_activations(model, torch.full((3, 64, 64), 0.7))
    flat = first[0].reshape(first.shape[1], -1)
    assert torch.allclose(flat, flat[:, :1].expand_as(flat), atol=1e-6)
    assert np.array_equal(channel_mean(first), np.zeros((32, 32)))


def test_channel_mean_range():
    model = small()
    maps = extract_stage_activations(model, torch.randn(3, 64, 64))
    for m in maps:
        v = channel_mean(m)
        assert v.min() >= 0 and v.max() <= 1


# ---------------------------------------------------------------------------
# decoder structure


def test_unetpp_dense_grid():
    model = small()
    dec = model.decoder
    assert dec.levels == 5
    for j in range(1, 5):
        for i in range(5 - j):
            assert dec.graph[(i, j)] == [(i, k) for k in range(j)] + [(i + 1, j - 1)]
            conv = dec.nodes[f"{i}_{j}"][0][0]
            assert conv.in_channels == dec.channels[i] * (j + 1)
    assert len(dec.graph) == 10


def test_aspp_concat_channels():
    aspp = ASPP(64, 16, rates=(6, 12, 18))
    x = torch.randn(1, 64, 8, 8)
    outs = aspp.branch_outputs(x)
    assert len(outs) == 5  # 1x1, three atrous, image pooling
    assert sum(o.shape[1] for o in outs) == aspp.concat_channels == 80
    dilations = [b[0].dilation[0] for b in aspp.branches[1:]]
    assert dilations == [6, 12, 18]
    assert aspp(x).shape == (1, 16, 8, 8)


def test_deeplab_low_level_from_stride4():
    model = small("resnet", "18", "deeplabv3plus")
    assert model.encoder_spec.stage_strides()[model.decoder_spec.low_level_stage] == 4


@pytest.mark.parametrize("family,variant", FAMILIES)
@pytest.mark.parametrize("decoder", ["unetpp", "deeplabv3plus"])
def test_no_dead_parameters(family, variant, decoder):
    model = small(family, variant, decoder, seed=1)
    model.train()
    torch.manual_seed(0)
    x = torch.randn(2, 3, 64, 64)
    g = (torch.rand(2, 1, 64, 64) > 0.5).float()
    compute_loss(LossConfig("weighted_dice"), model(x), g).backward()
    dead = [n for n, p in model.named_parameters() if p.grad is None or not torch.any(p.grad != 0)]
    assert dead == []


# ---------------------------------------------------------------------------
# receptive field


def test_rf_single_conv():
    assert receptive_field([LayerConfig(3)]) == 3


def _vgg16_layers():
    layers = []
    for n in (2, 2, 3, 3, 3):
        layers += [LayerConfig(3, 1, padding=1)] * n + [LayerConfig(2, 2, kind="maxpool")]
    return layers


def _resnet50_layers():
    layers = [LayerConfig(7, 2, padding=3), LayerConfig(3, 2, padding=1, kind="maxpool")]
    for li, n in enumerate((3, 4, 6, 3)):
        for b in range(n):
            s = 2 if (b == 0 and li > 0) else 1
            layers += [LayerConfig(1, s), LayerConfig(3, 1, padding=1), LayerConfig(1)]
    return layers


def test_rf_vgg16():
    assert receptive_field(_vgg16_layers()) == 212
    assert encoder_spec("vgg", 16).rf_table()[-1]["receptive_field"] == 212


def test_rf_resnet50():
    assert receptive_field(_resnet50_layers()) == 483
    assert encoder_spec("resnet", 50).rf_table()[-1]["receptive_field"] == 483


def test_rf_dilation():
    assert LayerConfig(3, dilation=6).effective_kernel == 13
    assert receptive_field([LayerConfig(3, dilation=2)]) == 5


def test_rf_rejects_bad_layers():
    with pytest.raises(ValueError):
        LayerConfig(0)
    with pytest.raises(ValueError):
        LayerConfig(3, stride=0)
    with pytest.raises(ValueError):
        receptive_field([])


layer_st = st.builds(LayerConfig, st.integers(1, 7), st.integers(1, 3), st.integers(1, 4))


@given(st.lists(layer_st, min_size=1, max_size=12), layer_st)
def test_rf_monotone(layers, extra):
    before = receptive_field(layers)
    after = receptive_field(layers + [extra])
    if extra.effective_kernel > 1:
        assert after > before
    else:
        assert after == before


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip(tmp_path):
    model = small("mobilenet", "v2", "deeplabv3plus", seed=4)
    x = torch.randn(1, 3, 64, 64)
    path = save_checkpoint(model, tmp_path / "m.ckpt", {"epoch": 3})
    loaded, meta = load_checkpoint(path)
    assert meta == {"epoch": 3}
    assert torch.equal(forward(model, x), forward(loaded, x))
    again = save_checkpoint(loaded, tmp_path / "m2.ckpt", {"epoch": 3})
    assert path.read_bytes() == again.read_bytes()


def test_checkpoint_spec_mismatch(tmp_path):
    import json
    import zipfile

    path = save_checkpoint(small(), tmp_path / "m.ckpt")
    with zipfile.ZipFile(path) as zf:
        members = {n: zf.read(n) for n in zf.namelist()}
    spec = json.loads(members["spec.json"])
    spec["encoder"] = encoder_spec("vgg", 16, 0.25).to_dict()
    members["spec.json"] = json.dumps(spec).encode()
    bad = tmp_path / "bad.ckpt"
    with zipfile.ZipFile(bad, "w") as zf:
        for n, data in members.items():
            zf.writestr(n, data)
    with pytest.raises(CheckpointError, match="mismatch"):
        load_checkpoint(bad)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")
