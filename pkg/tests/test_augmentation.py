import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bldseg.augmentation import (
    DEFAULT_RANGES,
    AugmentationOp,
    AugmentationPolicy,
    LinearRamp,
    apply,
    augment,
    ramp_at,
    sample_op,
    sample_rng,
)

PHOTOMETRIC = ["invert_colors", "random_contrast", "random_brightness"]


def blob(size=64, seed=0):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 256, (size, size, 3), dtype=np.uint8)
    mask = np.zeros((size, size), np.uint8)
    mask[size // 4 : size // 2, size // 3 : 2 * size // 3] = 1
    return img, mask


def test_geometric_flag():
    geo = {k for k in DEFAULT_RANGES if AugmentationOp.default(k).geometric}
    assert geo == {"rotate", "affine", "translate", "horizontal_flip"}


def test_op_validation():
    with pytest.raises(ValueError):
        AugmentationOp("rotate", (5.0, -5.0))
    with pytest.raises(ValueError):
        AugmentationOp("cutout")
    with pytest.raises(ValueError):
        AugmentationPolicy(ops=())
    with pytest.raises(ValueError):
        AugmentationPolicy(apply_probability=1.5)


def test_never_applied_at_p0():
    policy = AugmentationPolicy(apply_probability=0.0)
    rng = np.random.default_rng(0)
    assert not any(sample_op(policy, rng)[0] for _ in range(10_000))


def test_single_op_always_chosen_at_p1():
    op = AugmentationOp.default("rotate")
    policy = AugmentationPolicy(ops=(op,), apply_probability=1.0)
    rng = np.random.default_rng(1)
    draws = [sample_op(policy, rng) for _ in range(1000)]
    assert all(a and o == op for a, o, _ in draws)


def test_applied_fraction_at_half():
    policy = AugmentationPolicy(apply_probability=0.5)
    rng = np.random.default_rng(2024)
    frac = np.mean([sample_op(policy, rng)[0] for _ in range(10_000)])
    assert 0.47 <= frac <= 0.53


def test_ops_chosen_uniformly():
    policy = AugmentationPolicy(apply_probability=1.0)
    rng = np.random.default_rng(3)
    kinds = [sample_op(policy, rng)[1].kind for _ in range(7000)]
    counts = np.array([kinds.count(k) for k in DEFAULT_RANGES])
    assert counts.min() > 850 and counts.max() < 1150


def test_magnitude_scaled_by_ramp():
    policy = AugmentationPolicy(ops=(AugmentationOp("rotate", (-30, 30)),), apply_probability=1.0)
    rng = np.random.default_rng(4)
    mags = np.array([sample_op(policy, rng, epoch=0)[2] for _ in range(2000)])
    assert np.abs(mags).max() <= 30 * 0.25
    assert np.abs(mags).max() > 30 * 0.25 * 0.95


def test_ramp_examples():
    r = LinearRamp()
    assert ramp_at(r, 0) == 0.25
    assert ramp_at(r, 20) == 1.0
    assert ramp_at(r, 10) == pytest.approx(0.625)
    assert ramp_at(r, 100) == 1.0
    with pytest.raises(ValueError):
        ramp_at(r, -1)


@given(st.floats(0, 50), st.floats(0, 50))
def test_ramp_monotone(a, b):
    r = LinearRamp()
    lo, hi = sorted((a, b))
    assert 0 < ramp_at(r, lo) <= ramp_at(r, hi) <= 1.0


def test_rotate_zero_is_identity():
    img, mask = blob()
    out, m = apply(img, mask, AugmentationOp.default("rotate"), 0.0)
    assert np.array_equal(out, img) and np.array_equal(m, mask)


def test_flip_twice_is_identity():
    img, mask = blob()
    op = AugmentationOp.default("horizontal_flip")
    once = apply(img, mask, op)
    twice = apply(*once, op)
    assert not np.array_equal(once[1], mask)
    assert np.array_equal(twice[0], img) and np.array_equal(twice[1], mask)


def test_brightness_on_constant_image():
    img = np.full((8, 8, 3), 0.5)
    mask = np.eye(8, dtype=np.uint8)
    out, m = apply(img, mask, AugmentationOp.default("random_brightness"), 0.1)
    assert np.allclose(out, 0.6, atol=1e-12)
    assert np.array_equal(m, mask)


def test_invert_colors():
    img = np.linspace(0, 1, 48).reshape(4, 4, 3)
    out, _ = apply(img, np.zeros((4, 4), np.uint8), AugmentationOp.default("invert_colors"))
    assert np.allclose(out, 1 - img)


@pytest.mark.parametrize("kind", PHOTOMETRIC)
def test_photometric_ops_leave_mask_untouched(kind):
    img, mask = blob(seed=5)
    op = AugmentationOp.default(kind)
    out, m = apply(img, mask, op, op.magnitude_range[1])
    assert m is mask or np.array_equal(m, mask)
    assert out.shape == img.shape and out.dtype == img.dtype


@pytest.mark.parametrize("kind", sorted(DEFAULT_RANGES))
def test_output_dims_unchanged(kind):
    img, mask = blob(48, seed=6)
    op = AugmentationOp.default(kind)
    out, m = apply(img, mask, op, op.magnitude_range[0])
    assert out.shape == img.shape and m.shape == mask.shape


@pytest.mark.parametrize("degrees", [90, 180, 270, -90])
def test_right_angle_rotation_preserves_count(degrees):
    img, mask = blob(seed=7)
    op = AugmentationOp("rotate", (-270, 270))
    out, m = apply(img, mask, op, degrees)
    assert m.sum() == mask.sum()
    assert np.array_equal(np.sort(out.ravel()), np.sort(img.ravel()))


@pytest.mark.parametrize("kind,mag", [("rotate", 30.0), ("rotate", -17.0), ("affine", 10.0), ("affine", -6.5)])
def test_warp_count_within_boundary_budget(kind, mag):
    img, mask = blob(64, seed=8)
    _, m = apply(img, mask, AugmentationOp.default(kind), mag)
    assert abs(int(m.sum()) - int(mask.sum())) <= 2 * (64 + 64)
    assert set(np.unique(m)) <= {0, 1}


def test_translate_shifts_mask():
    img, mask = blob(64)
    _, m = apply(img, mask, AugmentationOp.default("translate"), 0.0625)  # 4 px
    assert np.array_equal(m[4:, 4:], mask[:-4, :-4])
    assert m.sum() == mask.sum()


def test_out_of_range_magnitude_rejected():
    img, mask = blob()
    with pytest.raises(ValueError):
        apply(img, mask, AugmentationOp.default("rotate"), 45.0)
    with pytest.raises(ValueError):
        apply(img, mask, AugmentationOp.default("random_brightness"), -0.3)


def test_seeded_stream_reproducible():
    img, mask = blob(32)
    policy = AugmentationPolicy(apply_probability=0.9)

    def stream():
        return [augment(img, mask, policy, sample_rng(11, e, i), e) for e in (0, 5) for i in range(20)]

    a, b = stream(), stream()
    for (ia, ma, oa, ga), (ib, mb, ob, gb) in zip(a, b):
        assert np.array_equal(ia, ib) and np.array_equal(ma, mb) and oa == ob and ga == gb


def test_substreams_differ_by_worker_and_index():
    draws = {tuple(sample_rng(0, 0, i, w).random(4)) for i in range(5) for w in range(3)}
    assert len(draws) == 15


def test_policy_dict_roundtrip():
    p = AugmentationPolicy(apply_probability=0.3, schedule=LinearRamp(10, 0.5))
    assert AugmentationPolicy.from_dict(p.to_dict()) == p
    assert AugmentationPolicy.from_dict({"ops": ["rotate"]}).ops == (AugmentationOp.default("rotate"),)
