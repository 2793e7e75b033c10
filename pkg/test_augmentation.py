import numpy as np
import pytest

from conftest import blob_samples
from services.augmentation import (
    AugmentParams, apply_geometric, augment, draw_geometry, rotation_scale_matrix, sample_rng,
    shift_matrix, transform_point,
)
from services.records import DEFECT, Annotation, Sample

ALL_OFF = dict(p_shift=0, p_scale=0, p_rotate=0, p_crop=0,
               p_brightness=0, p_contrast=0, p_gamma=0, p_noise=0)


def _blob(cx, cy, size=64, sigma=2.0):
    yy, xx = np.mgrid[0:size, 0:size]
    image = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma ** 2)).astype(np.float32)
    return Sample(image=image, annotation=Annotation(DEFECT, (float(cx), float(cy))),
                  series_id=1, frame_index=0)


def test_identity_params_are_bit_exact():
    sample = blob_samples(2, size=32, seed=5)[0]
    out = augment(sample, AugmentParams.identity(), np.random.default_rng(0))
    assert np.array_equal(out.image, sample.image)
    assert out.annotation == sample.annotation


def test_shift_moves_centre():
    sample = _blob(32, 32)
    moved = apply_geometric(sample, shift_matrix(10, 0))
    assert moved.annotation.center_px == pytest.approx((42.0, 32.0))


def test_quarter_turn_about_image_centre():
    assert transform_point(rotation_scale_matrix(90.0, 1.0, (31.5, 31.5)), (10, 32)) == \
        pytest.approx((31.0, 10.0))


def test_bright_spot_follows_annotation():
    params = AugmentParams(shift_fraction=0.1, scale_range=0.1, rotate_deg=20, crop_range=0.2,
                           p_shift=1, p_scale=1, p_rotate=1, p_crop=1)
    sample = _blob(20.0, 30.0)
    checked = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        moved = apply_geometric(sample, draw_geometry(params, rng, 64, 64))
        if moved is None:
            continue
        row, col = np.unravel_index(np.argmax(moved.image), moved.image.shape)
        x, y = moved.annotation.center_px
        assert np.hypot(col - x, row - y) <= 1.5
        checked += 1
    assert checked > 10


def test_augmentation_preserves_labels():
    params = AugmentParams(p_shift=1, p_rotate=1, p_noise=1, p_brightness=1)
    for sample in blob_samples(10, size=32, seed=2):
        out = augment(sample, params, sample_rng(3, 1, sample.series_id, sample.frame_index))
        assert out.annotation.label == sample.annotation.label
        assert out.annotation.within(32, 32)
        assert out.image.shape == sample.image.shape
        assert 0.0 <= out.image.min() and out.image.max() <= 1.0


def test_augmentation_is_deterministic_per_sample_stream():
    params = AugmentParams(p_shift=1, p_rotate=1, p_noise=1)
    sample = blob_samples(1, size=32, seed=4)[0]
    a = augment(sample, params, sample_rng(7, 2, 1, 0))
    b = augment(sample, params, sample_rng(7, 2, 1, 0))
    c = augment(sample, params, sample_rng(7, 3, 1, 0))
    assert np.array_equal(a.image, b.image)
    assert a.annotation == b.annotation
    assert not np.array_equal(a.image, c.image)


def test_retry_exhaustion_returns_sample_unchanged():
    image = np.zeros((64, 64), dtype=np.float32)
    sample = Sample(image=image, annotation=Annotation(DEFECT, (0.0, 0.0)), series_id=1, frame_index=0)
    # any non-zero rotation about the image centre pushes the corner out of frame
    params = AugmentParams(rotate_deg=10.0, max_retries=5, **{**ALL_OFF, "p_rotate": 1})
    assert augment(sample, params, np.random.default_rng(0)) is sample
