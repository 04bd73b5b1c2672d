"""
Tests for weak/strong augmentation
"""

import numpy as np
import pytest

from cratertan.core.augmentation import (
    STRONG_POLICY,
    WEAK_POLICY,
    AffineParams,
    AugKind,
    AugPolicy,
    affine_matrix,
    apply_strong,
    apply_weak,
    augment,
    hflip,
    mosaic,
    select_policy,
    stitch_2x2,
    warp_affine,
)
from cratertan.core.data_domains import MARS_PROFILE, BoundingBox, LabeledImage, generate_synthetic_domain


@pytest.fixture
def one_box_image():
    """64x64 gradient image with a single box"""
    pixels = np.tile(np.arange(64, dtype=np.uint8)[None, :, None] * 3, (64, 1, 1))
    return LabeledImage(pixels, [BoundingBox(0, 0.3, 0.4, 0.2, 0.1)], "img")


def _rng(seed=0):
    return np.random.default_rng(seed)


def test_select_policy():
    """Test complex sources get weak and simple sources get strong augmentation"""
    assert select_policy("complex") is WEAK_POLICY
    assert select_policy("simple") is STRONG_POLICY
    assert select_policy("simple") is select_policy("simple")
    assert WEAK_POLICY.kind == AugKind.WEAK
    assert STRONG_POLICY.affine.scale_range == (0.5, 1.5)


def test_policy_validation():
    """Test invalid probabilities and scale ranges are rejected"""
    with pytest.raises(ValueError):
        AugPolicy(kind="weak", flip_prob=1.5)
    with pytest.raises(ValueError):
        AugPolicy(kind="strong", affine=AffineParams(scale_range=(0.0, 1.0)))


def test_forced_flip(one_box_image):
    """Test a forced flip mirrors cx only"""
    policy = AugPolicy(kind="weak", flip_prob=1.0, stitch_prob=0.0)
    out = apply_weak(one_box_image, _rng(), policy)
    box = out.boxes[0]
    assert box.cx == pytest.approx(0.7)
    assert (box.cy, box.w, box.h) == pytest.approx((0.4, 0.2, 0.1))
    assert np.array_equal(out.pixels, one_box_image.pixels[:, ::-1])


def test_double_flip_is_identity(one_box_image):
    """Test flipping twice restores pixels and boxes"""
    twice = hflip(hflip(one_box_image))
    assert np.array_equal(twice.pixels, one_box_image.pixels)
    assert twice.boxes[0].cx == pytest.approx(one_box_image.boxes[0].cx)


def test_forced_stitch_halves_boxes(one_box_image):
    """Test a forced 2x2 stitch of four one-box images"""
    pool = [
        LabeledImage(np.zeros((64, 64, 1), dtype=np.uint8), [BoundingBox(0, 0.5, 0.5, 0.4, 0.2)], f"p{i}")
        for i in range(3)
    ]
    policy = AugPolicy(kind="weak", flip_prob=0.0, stitch_prob=1.0, min_box_area_frac=0.0)
    out = apply_weak(one_box_image, _rng(), policy, pool=pool)

    assert out.pixels.shape == (128, 128, 1)
    assert len(out.boxes) <= 4
    widths = sorted(b.w for b in out.boxes)
    assert widths == pytest.approx(sorted([0.1] + [0.2] * (len(out.boxes) - 1)))
    assert out.boxes[0].cx == pytest.approx(0.15)


def test_identity_policies(one_box_image):
    """Test zero probabilities and identity affine leave the image unchanged"""
    for kind in ("weak", "strong"):
        policy = AugPolicy(kind=kind, flip_prob=0.0, mosaic_prob=0.0, stitch_prob=0.0)
        out = augment(one_box_image, _rng(), policy)
        assert np.array_equal(out.pixels, one_box_image.pixels)
        assert out.boxes == one_box_image.boxes


def test_identity_affine_matrix(one_box_image):
    """Test the identity matrix leaves pixels and boxes unchanged"""
    matrix = affine_matrix((64, 64), (64, 64))
    assert np.allclose(matrix, np.eye(3))
    out = warp_affine(one_box_image, matrix, (64, 64))
    assert np.array_equal(out.pixels, one_box_image.pixels)
    assert out.boxes == one_box_image.boxes


def test_pure_translation_shifts_cx(one_box_image):
    """Test a +0.1 width translation moves every box by +0.1"""
    matrix = affine_matrix((64, 64), (64, 64), translate_frac=(0.1, 0.0))
    out = warp_affine(one_box_image, matrix, (64, 64))
    assert out.boxes[0].cx == pytest.approx(0.4)
    assert out.boxes[0].cy == pytest.approx(0.4)
    assert out.boxes[0].w == pytest.approx(0.2)


def test_translation_clips_at_border():
    """Test boxes pushed past the border are clipped"""
    image = LabeledImage(np.zeros((100, 100, 1), dtype=np.uint8), [BoundingBox(0, 0.9, 0.5, 0.1, 0.1)])
    out = warp_affine(image, affine_matrix((100, 100), (100, 100), translate_frac=(0.1, 0.0)), (100, 100))
    x1, _, x2, _ = out.boxes[0].to_xyxy()
    assert x2 == pytest.approx(1.0)
    assert x1 == pytest.approx(0.95)


def test_mosaic_at_center_matches_stitch():
    """Test a centered mosaic of equal-size images equals the 2x2 stitch"""
    images = generate_synthetic_domain(MARS_PROFILE, 4, 64, seed=3)
    stitched = stitch_2x2(images)
    mosaicked = mosaic(images, center=(64, 64), size=64)

    assert np.array_equal(stitched.pixels, mosaicked.pixels)
    assert len(stitched.boxes) == len(mosaicked.boxes)
    for a, b in zip(stitched.boxes, mosaicked.boxes):
        assert (a.cx, a.cy, a.w, a.h) == pytest.approx((b.cx, b.cy, b.w, b.h), abs=1e-9)


def test_mosaic_rejects_bad_input():
    """Test mosaic argument checks"""
    image = LabeledImage(np.zeros((8, 8, 1), dtype=np.uint8))
    with pytest.raises(ValueError):
        mosaic([image] * 3, center=(8, 8))
    with pytest.raises(ValueError):
        mosaic([image] * 4, center=(20, 8))


def test_strong_keeps_size_and_box_validity():
    """Test random strong augmentation keeps the side and never invents boxes"""
    images = generate_synthetic_domain(MARS_PROFILE, 6, 64, seed=1)
    rng = _rng(11)
    for image in images:
        out = apply_strong(image, rng)
        assert out.pixels.shape == image.pixels.shape
        assert len(out.boxes) <= 4 * len(image.boxes)
        for box in out.boxes:
            assert 0.0 <= box.cx <= 1.0 and 0.0 < box.w <= 1.0
            assert box.area >= STRONG_POLICY.min_box_area_frac


def test_augment_is_reproducible():
    """Test the same rng seed gives the same augmentation"""
    images = generate_synthetic_domain(MARS_PROFILE, 4, 64, seed=2)
    for policy in (WEAK_POLICY, STRONG_POLICY):
        a = augment(images[0], _rng(5), policy, pool=images)
        b = augment(images[0], _rng(5), policy, pool=images)
        assert np.array_equal(a.pixels, b.pixels)
        assert a.boxes == b.boxes
