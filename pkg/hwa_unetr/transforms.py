import dataclasses
import logging
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError
from .tensor import trilinear_resize

logger = logging.getLogger(__name__)


@dataclass
class Crop:
    image: np.ndarray     # [M, d, h, w]
    target: np.ndarray    # [K, d, h, w]
    center: Tuple[int, int, int]
    positive: bool


def normalize_intensity(voxels: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance over the whole volume (constant volumes are only centred)."""
    v = voxels.astype(np.float64)
    std = v.std()
    v = v - v.mean()
    if std > 0:
        v = v / std
    return v.astype(np.float32)


def normalize_case(case):
    images = {name: dataclasses.replace(vol, voxels=normalize_intensity(vol.voxels))
              for name, vol in case.images.items()}
    return dataclasses.replace(case, images=images)


def _resample(voxels: np.ndarray, extents, mode: str) -> np.ndarray:
    if tuple(voxels.shape) == tuple(extents):
        return voxels
    x = torch.from_numpy(np.ascontiguousarray(voxels))[None, None]
    if mode == 'nearest':
        y = F.interpolate(x, size=tuple(extents), mode='nearest')
    else:
        y = trilinear_resize(x, extents)
    return y[0, 0].numpy()


def stack_volumes(volumes, extents, mode='trilinear') -> np.ndarray:
    return np.stack([_resample(v.voxels, extents, mode) for v in volumes])


def case_arrays(case) -> Tuple[np.ndarray, np.ndarray]:
    """Stack images and masks on the first modality's grid.

    Images are resampled trilinearly, masks by nearest neighbour.
    """
    extents = case.reference.extents
    return (stack_volumes(case.images.values(), extents),
            stack_volumes(case.masks.values(), extents, 'nearest'))


def extract_window(stack: np.ndarray, start: Sequence[int], size: Sequence[int]) -> np.ndarray:
    """``stack[:, start:start + size]`` with zeros wherever the window leaves the volume."""
    out = np.zeros((stack.shape[0],) + tuple(size), dtype=stack.dtype)
    src, dst = [slice(None)], [slice(None)]
    for s, n, ext in zip(start, size, stack.shape[1:]):
        lo, hi = max(s, 0), min(s + n, ext)
        if hi <= lo:
            return out
        src.append(slice(lo, hi))
        dst.append(slice(lo - s, hi - s))
    out[tuple(dst)] = stack[tuple(src)]
    return out


def sample_crop(case, crop: Sequence[int], rng: np.random.Generator, positive_ratio: float = 0.5) -> Crop:
    """Crop centred on a foreground voxel with probability ``positive_ratio``, else on background."""
    crop = tuple(int(c) for c in crop)
    if len(crop) != 3 or min(crop) < 1:
        raise ConfigError(f'crop extents must be three positive sizes, got {crop}')
    image, target = case_arrays(case)
    foreground = target.any(axis=0)

    positive = bool(rng.random() < positive_ratio)
    if positive and not foreground.any():
        logger.warning('case %s has empty masks; drawing a background-centred crop', case.case_id)
        positive = False
    pool = np.argwhere(foreground if positive else ~foreground)
    if len(pool) == 0:
        # every voxel is foreground
        positive = True
        pool = np.argwhere(foreground)
    center = tuple(int(v) for v in pool[rng.integers(len(pool))])
    start = [c - n // 2 for c, n in zip(center, crop)]
    return Crop(extract_window(image, start, crop), extract_window(target, start, crop), center, positive)


class Compose(object):
    def __init__(self, transforms):
        self.transforms = transforms

    def __call__(self, image, target, rng):
        for t in self.transforms:
            image, target = t(image, target, rng)
        return image, target


class RandomAxisFlip(object):
    """Flip each spatial axis independently with probability ``p``, image and mask alike."""

    def __init__(self, p=0.5):
        self.p = p

    def __call__(self, image, target, rng):
        for axis in (1, 2, 3):
            if rng.random() < self.p:
                image = np.flip(image, axis)
                target = np.flip(target, axis)
        return np.ascontiguousarray(image), np.ascontiguousarray(target)


class RandomIntensity(object):
    """x <- x * u + v on the image only, u in [1 - scale, 1 + scale], v in [-shift, shift]."""

    def __init__(self, p=0.2, scale=0.1, shift=0.1):
        self.p = p
        self.scale = scale
        self.shift = shift

    def __call__(self, image, target, rng):
        if rng.random() < self.p:
            u = rng.uniform(1 - self.scale, 1 + self.scale)
            v = rng.uniform(-self.shift, self.shift)
            image = (image * u + v).astype(image.dtype)
        return image, target


def build_augmentation(cfg) -> Compose:
    return Compose([
        RandomAxisFlip(cfg.flip_prob),
        RandomIntensity(cfg.intensity_prob, cfg.intensity_scale, cfg.intensity_shift),
    ])


def augment(image, target, rng, cfg):
    return build_augmentation(cfg)(image, target, rng)
