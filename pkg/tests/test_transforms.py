import logging
from types import SimpleNamespace

import numpy as np
import pytest

from hwa_unetr.dataset import CaseRecord, PhantomSpec, Volume, generate_phantom
from hwa_unetr.transforms import (Compose, RandomAxisFlip, RandomIntensity, augment, case_arrays,
                                  extract_window, normalize_intensity, sample_crop, stack_volumes)


def test_normalize_intensity():
    v = np.arange(24, dtype=np.float32).reshape(2, 3, 4) * 3 + 7
    out = normalize_intensity(v)
    assert out.dtype == np.float32
    assert abs(float(out.mean())) < 1e-6
    assert float(out.std()) == pytest.approx(1.0, abs=1e-5)
    assert np.array_equal(normalize_intensity(np.full((2, 2, 2), 5.0)), np.zeros((2, 2, 2), np.float32))


def test_stack_resamples_to_reference_grid():
    a = Volume(np.zeros((4, 4, 4)))
    b = Volume(np.ones((2, 2, 2)))
    stacked = stack_volumes([a, b], (4, 4, 4))
    assert stacked.shape == (2, 4, 4, 4)
    assert np.allclose(stacked[1], 1.0)


def test_extract_window_pads_with_zeros():
    stack = np.arange(27, dtype=np.float32).reshape(1, 3, 3, 3) + 1
    out = extract_window(stack, (-1, 0, 1), (3, 3, 3))
    assert out.shape == (1, 3, 3, 3)
    assert not out[:, 0].any()
    assert np.array_equal(out[0, 1:, :, :2], stack[0, :2, :, 1:])
    assert not out[:, :, :, 2].any()


def test_crop_is_bitwise_subvolume(small_phantom, rng):
    case = generate_phantom(small_phantom, seed=3)
    image, target = case_arrays(case)
    crop = sample_crop(case, (8, 8, 8), rng)
    start = [c - 4 for c in crop.center]
    assert crop.image.shape == (2, 8, 8, 8)
    assert np.array_equal(crop.image, extract_window(image, start, (8, 8, 8)))
    assert np.array_equal(crop.target, extract_window(target, start, (8, 8, 8)))
    assert crop.positive == bool(target[(slice(None),) + crop.center].any())


def test_positive_fraction_is_balanced(small_phantom):
    case = generate_phantom(small_phantom, seed=4)
    rng = np.random.default_rng(0)
    positives = sum(sample_crop(case, (4, 4, 4), rng).positive for _ in range(1000))
    assert abs(positives / 1000 - 0.5) <= 0.05


def test_empty_mask_falls_back_with_warning(caplog, rng):
    case = generate_phantom(PhantomSpec(extents=(16, 16, 16), lesion_count=(0, 0), lesion_radius=(2.0, 3.0)),
                            seed=0)
    with caplog.at_level(logging.WARNING, logger='hwa_unetr.transforms'):
        crops = [sample_crop(case, (8, 8, 8), rng, positive_ratio=1.0) for _ in range(3)]
    assert not any(c.positive for c in crops)
    assert 'empty masks' in caplog.text


def test_all_foreground_case_still_crops(rng):
    img = Volume(np.ones((4, 4, 4)))
    case = CaseRecord('full', {'T2': img}, {'T2': Volume(np.ones((4, 4, 4)))})
    crop = sample_crop(case, (2, 2, 2), rng, positive_ratio=0.0)
    assert crop.positive


def test_double_flip_is_identity(rng):
    image = rng.standard_normal((2, 4, 5, 6)).astype(np.float32)
    target = (rng.random((2, 4, 5, 6)) > 0.5).astype(np.float32)
    flip = RandomAxisFlip(p=1.0)
    img1, tgt1 = flip(image, target, rng)
    assert not np.array_equal(img1, image)
    img2, tgt2 = flip(img1, tgt1, rng)
    assert np.array_equal(img2, image)
    assert np.array_equal(tgt2, target)


def test_flip_moves_image_and_mask_together(rng):
    image = rng.standard_normal((1, 6, 6, 6)).astype(np.float32)
    target = (image > 0.3).astype(np.float32)
    for _ in range(10):
        img, tgt = RandomAxisFlip(0.5)(image, target, rng)
        assert np.array_equal(tgt, (img > 0.3).astype(np.float32))


def test_intensity_leaves_masks_binary(rng):
    image = rng.standard_normal((2, 4, 4, 4)).astype(np.float32)
    target = (rng.random((2, 4, 4, 4)) > 0.5).astype(np.float32)
    img, tgt = RandomIntensity(p=1.0, scale=0.1, shift=0.1)(image, target, rng)
    assert tgt is target
    u, v = np.polyfit(image.ravel().astype(np.float64), img.ravel().astype(np.float64), 1)
    assert np.allclose(img, image * u + v, atol=1e-5)
    assert 0.9 - 1e-6 <= u <= 1.1 + 1e-6
    assert abs(v) <= 0.1 + 1e-6


def test_zero_probability_pipeline_is_identity(rng):
    cfg = SimpleNamespace(flip_prob=0.0, intensity_prob=0.0, intensity_scale=0.1, intensity_shift=0.1)
    image = rng.standard_normal((2, 4, 4, 4)).astype(np.float32)
    target = (rng.random((2, 4, 4, 4)) > 0.5).astype(np.float32)
    img, tgt = augment(image, target, rng, cfg)
    assert np.array_equal(img, image)
    assert np.array_equal(tgt, target)


def test_compose_threads_rng_through_transforms(rng):
    seen = []

    def record(image, target, r):
        seen.append(r)
        return image, target

    Compose([record, record])(np.zeros(1), np.zeros(1), rng)
    assert seen == [rng, rng]
