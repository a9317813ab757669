"""Volumes, cases, manifests, phantoms and the training dataset."""
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch.utils.data import Dataset

from .errors import ConfigError, DataError, ShapeError, SpacingError, TruncatedFileError, VolumeFormatError
from .transforms import normalize_case, sample_crop

logger = logging.getLogger(__name__)

VOLUME_MAGIC = b'HWAV'
VOLUME_VERSION = 1
VOLUME_SUFFIX = '.hwav'
# magic, version, extents, spacing, label length
_VOLUME_HEADER = struct.Struct('<4sI3I3fH')

SPLITS = ('train', 'val', 'test', 'unassigned')
SPLIT_FRACTIONS = (0.7, 0.1, 0.2)

GASTRIC_MODALITIES = ('FS-T2W', 'CE-T1W', 'ADC')
NESTED_CHANNELS = ('WT', 'ET', 'TC')
NESTED_SCALES = (1.0, 0.4, 0.7)


@dataclass
class Volume:
    voxels: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    modality: str = ''

    def __post_init__(self):
        self.voxels = np.ascontiguousarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ShapeError(f'a volume needs three non-empty axes, got shape {self.voxels.shape}')
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 and math.isfinite(s) for s in spacing):
            raise SpacingError(f'spacing must be three positive values, got {self.spacing}')
        self.spacing = spacing

    @property
    def extents(self) -> Tuple[int, int, int]:
        return tuple(self.voxels.shape)


def encode_volume(volume: Volume) -> bytes:
    label = volume.modality.encode('utf-8')
    if len(label) > 0xFFFF:
        raise VolumeFormatError('modality label longer than 65535 bytes')
    header = _VOLUME_HEADER.pack(VOLUME_MAGIC, VOLUME_VERSION, *volume.extents, *volume.spacing, len(label))
    return header + label + volume.voxels.astype('<f4').tobytes(order='C')


def decode_volume(data: bytes, source: str = '<bytes>') -> Volume:
    if data[:4] != VOLUME_MAGIC:
        raise VolumeFormatError(f'{source}: bad magic {data[:4]!r}')
    if len(data) < _VOLUME_HEADER.size:
        raise TruncatedFileError(f'{source}: header is truncated')
    _, version, d, h, w, sd, sh, sw, n = _VOLUME_HEADER.unpack_from(data)
    if version != VOLUME_VERSION:
        raise VolumeFormatError(f'{source}: unsupported version {version}')
    label_end = _VOLUME_HEADER.size + n
    expected = d * h * w * 4
    if len(data) < label_end + expected:
        raise TruncatedFileError(f'{source}: payload holds {max(0, len(data) - label_end)} bytes, '
                                 f'expected {expected}')
    if len(data) > label_end + expected:
        raise VolumeFormatError(f'{source}: {len(data) - label_end - expected} trailing bytes')
    if not all(s > 0 for s in (sd, sh, sw)):
        raise SpacingError(f'{source}: non-positive spacing {(sd, sh, sw)}')
    try:
        label = data[_VOLUME_HEADER.size:label_end].decode('utf-8')
    except UnicodeDecodeError as exc:
        raise VolumeFormatError(f'{source}: modality label is not UTF-8 ({exc.reason})') from exc
    voxels = np.frombuffer(data, dtype='<f4', count=d * h * w, offset=label_end)
    return Volume(voxels.astype(np.float32).reshape(d, h, w), (sd, sh, sw), label)


def write_volume(path, volume: Volume) -> Path:
    path = Path(path)
    path.write_bytes(encode_volume(volume))
    return path


def read_volume(path) -> Volume:
    path = Path(path)
    if not path.is_file():
        raise DataError(f'volume file {path} does not exist')
    return decode_volume(path.read_bytes(), str(path))


@dataclass
class Lesion:
    center: Tuple[int, int, int]
    radii: Tuple[float, float, float]


@dataclass
class CaseRecord:
    """Images and binary masks of one case.

    ``images`` is keyed by modality, ``masks`` by output channel. A mask named
    after a modality lives on that modality's grid; other masks (nested label
    profiles) live on the grid of the first modality.
    """
    case_id: str
    images: Dict[str, Volume]
    masks: Dict[str, Volume]
    split: str = 'unassigned'
    lesions: List[Lesion] = field(default_factory=list)

    def __post_init__(self):
        if not self.images or not self.masks:
            raise DataError(f'case {self.case_id}: needs at least one image and one mask')
        if self.split not in SPLITS:
            raise DataError(f'case {self.case_id}: unknown split {self.split!r}')
        first = next(iter(self.images.values()))
        for name, mask in self.masks.items():
            ref = self.images.get(name, first)
            if mask.extents != ref.extents or mask.spacing != ref.spacing:
                raise DataError(f'case {self.case_id}: mask {name} does not share the grid of its image '
                                f'({mask.extents}/{mask.spacing} vs {ref.extents}/{ref.spacing})')
            if not np.isin(mask.voxels, (0.0, 1.0)).all():
                raise DataError(f'case {self.case_id}: mask {name} is not binary')

    @property
    def modalities(self) -> Tuple[str, ...]:
        return tuple(self.images)

    @property
    def channels(self) -> Tuple[str, ...]:
        return tuple(self.masks)

    @property
    def reference(self) -> Volume:
        return next(iter(self.images.values()))


@dataclass
class ManifestEntry:
    case_id: str
    split: str
    images: Tuple[str, ...]
    masks: Tuple[str, ...]


@dataclass
class Manifest:
    entries: List[ManifestEntry]
    seed: Optional[int] = None
    root: Path = Path('.')

    def by_split(self, split: str) -> List[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    def counts(self) -> Dict[str, int]:
        return {s: len(self.by_split(s)) for s in SPLITS if self.by_split(s)}


def write_manifest(path, manifest: Manifest) -> Path:
    path = Path(path)
    lines = ['# hwau-manifest v1', f'# seed={"-" if manifest.seed is None else manifest.seed}']
    for e in manifest.entries:
        lines.append('\t'.join([e.case_id, e.split, ','.join(e.images), ','.join(e.masks)]))
    path.write_text('\n'.join(lines) + '\n', encoding='utf-8')
    return path


def read_manifest(path) -> Manifest:
    """Parse a manifest; relative paths resolve against the manifest's directory."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f'manifest {path} does not exist')
    seed, entries, seen = None, [], set()
    try:
        lines = path.read_text(encoding='utf-8').splitlines()
    except UnicodeDecodeError as exc:
        raise VolumeFormatError(f'{path}: manifest is not UTF-8 ({exc.reason})') from exc
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        if line.startswith('#'):
            if line.startswith('# seed='):
                value = line[len('# seed='):].strip()
                try:
                    seed = None if value == '-' else int(value)
                except ValueError as exc:
                    raise VolumeFormatError(f'{path}:{lineno}: seed {value!r} is not an integer') from exc
            continue
        fields = line.split('\t')
        if len(fields) != 4:
            raise VolumeFormatError(f'{path}:{lineno}: expected 4 tab-separated fields, got {len(fields)}')
        case_id, split, images, masks = fields
        if split not in SPLITS:
            raise VolumeFormatError(f'{path}:{lineno}: unknown split {split!r}')
        if case_id in seen:
            raise VolumeFormatError(f'{path}:{lineno}: duplicate case {case_id}')
        seen.add(case_id)
        entries.append(ManifestEntry(case_id, split, tuple(images.split(',')), tuple(masks.split(','))))
    return Manifest(entries, seed, path.parent)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_dataset(manifest: Manifest, seed: int, fractions: Sequence[float] = SPLIT_FRACTIONS) -> Manifest:
    """Shuffle cases with ``seed`` and assign train / val / test in the given proportions."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f'split fractions must be three non-negative values summing to 1, got {fractions}')
    entries = sorted(manifest.entries, key=lambda e: e.case_id)
    n = len(entries)
    n_train = _round_half_up(fractions[0] * n)
    n_val = min(n - n_train, _round_half_up(fractions[1] * n))
    order = np.random.default_rng(seed).permutation(n)
    split_of = {}
    for rank, i in enumerate(order):
        split_of[int(i)] = 'train' if rank < n_train else 'val' if rank < n_train + n_val else 'test'
    out = [ManifestEntry(e.case_id, split_of[i], e.images, e.masks) for i, e in enumerate(entries)]
    logger.info('split %d cases with seed %d: %d/%d/%d', n, seed, n_train, n_val, n - n_train - n_val)
    return Manifest(out, seed, manifest.root)


@dataclass
class PhantomSpec:
    """Synthetic multi-modal case generator settings.

    ``contrast`` and ``intensity_offset`` are per modality; ``offsets`` is the
    integer rigid shift (voxels) of each modality's lesions.
    """
    extents: Tuple[int, int, int] = (16, 32, 32)
    modalities: Tuple[str, ...] = GASTRIC_MODALITIES[:2]
    lesion_count: Tuple[int, int] = (1, 2)
    lesion_radius: Tuple[float, float] = (3.0, 5.0)
    contrast: Tuple[float, ...] = (1.0, -0.8)
    intensity_offset: Tuple[float, ...] = (0.0, 0.2)
    offsets: Tuple[Tuple[int, int, int], ...] = ((0, 0, 0), (1, 1, 0))
    noise_sigma: float = 0.05
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    label_mode: str = 'per_modality'

    def __post_init__(self):
        self.extents = tuple(int(e) for e in self.extents)
        self.modalities = tuple(self.modalities)
        self.lesion_count = tuple(int(c) for c in self.lesion_count)
        self.lesion_radius = tuple(float(r) for r in self.lesion_radius)
        self.contrast = tuple(float(c) for c in self.contrast)
        self.intensity_offset = tuple(float(c) for c in self.intensity_offset)
        self.offsets = tuple(tuple(int(v) for v in o) for o in self.offsets)
        self.spacing = tuple(float(s) for s in self.spacing)

        m = len(self.modalities)
        if len(self.extents) != 3 or min(self.extents) < 1:
            raise ConfigError(f'phantom.extents must be three positive sizes, got {self.extents}')
        if m < 1 or len(set(self.modalities)) != m:
            raise ConfigError(f'phantom.modalities must be distinct names, got {self.modalities}')
        for name in ('contrast', 'intensity_offset', 'offsets'):
            if len(getattr(self, name)) != m:
                raise ConfigError(f'phantom.{name} needs one entry per modality ({m}), '
                                  f'got {len(getattr(self, name))}')
        if any(len(o) != 3 for o in self.offsets):
            raise ConfigError('phantom.offsets entries must have three components')
        lo, hi = self.lesion_count
        if lo < 0 or hi < lo:
            raise ConfigError(f'phantom.lesion_count must be 0 <= min <= max, got {self.lesion_count}')
        rlo, rhi = self.lesion_radius
        if rlo <= 0 or rhi < rlo:
            raise ConfigError(f'phantom.lesion_radius must be 0 < min <= max, got {self.lesion_radius}')
        if self.noise_sigma < 0:
            raise ConfigError('phantom.noise_sigma must be non-negative')
        if len(self.spacing) != 3 or not all(s > 0 for s in self.spacing):
            raise SpacingError(f'phantom.spacing must be positive, got {self.spacing}')
        if self.label_mode not in ('per_modality', 'nested'):
            raise ConfigError(f"phantom.label_mode must be 'per_modality' or 'nested', got {self.label_mode!r}")
        if self.label_mode == 'nested' and any(any(o) for o in self.offsets):
            raise ConfigError('nested label mode needs registered modalities (all offsets zero)')
        margin = np.ceil(rhi) + np.abs(np.array(self.offsets)).max(axis=0)
        if np.any(np.array(self.extents) - 1 - 2 * margin < 0):
            raise ConfigError(f'lesions of radius {rhi} with offsets {self.offsets} do not fit in {self.extents}')

    @property
    def channels(self) -> Tuple[str, ...]:
        return NESTED_CHANNELS if self.label_mode == 'nested' else self.modalities


def _ellipsoids(grid, lesions, shift=(0, 0, 0), scale=1.0):
    mask = np.zeros(grid.shape[1:], dtype=bool)
    for lesion in lesions:
        r = np.asarray(lesion.radii, dtype=np.float64) * scale
        c = np.asarray(lesion.center) + np.asarray(shift)
        q = sum(((grid[a] - c[a]) / r[a]) ** 2 for a in range(3))
        mask |= q <= 1.0
    return mask


def generate_phantom(spec: PhantomSpec, seed: int, case_id: str = 'case000') -> CaseRecord:
    """Draw ellipsoidal lesions and render every modality and mask.

    Lesion centres are integer voxels kept far enough from the border that
    every shifted copy stays inside the volume.
    """
    rng = np.random.default_rng(seed)
    extents = np.array(spec.extents)
    grid = np.indices(spec.extents, dtype=np.float64)
    shift_margin = np.abs(np.array(spec.offsets)).max(axis=0)

    lesions = []
    for _ in range(int(rng.integers(spec.lesion_count[0], spec.lesion_count[1] + 1))):
        radii = rng.uniform(*spec.lesion_radius, size=3)
        low = np.ceil(radii).astype(np.int64) + shift_margin
        high = extents - 1 - np.ceil(radii).astype(np.int64) - shift_margin
        center = rng.integers(low, high + 1)
        lesions.append(Lesion(tuple(int(c) for c in center), tuple(float(r) for r in radii)))

    images, masks = {}, {}
    if spec.label_mode == 'nested':
        nested = [_ellipsoids(grid, lesions, scale=s) for s in NESTED_SCALES]
        for name, m in zip(NESTED_CHANNELS, nested):
            masks[name] = Volume(m.astype(np.float32), spec.spacing, name)
        for i, name in enumerate(spec.modalities):
            # each modality highlights one compartment more than the others
            weights = np.full(3, 0.25)
            weights[i % 3] = 0.5
            signal = sum(w * m for w, m in zip(weights, nested))
            noise = rng.normal(0.0, spec.noise_sigma, spec.extents) if spec.noise_sigma else 0.0
            images[name] = Volume(spec.intensity_offset[i] + spec.contrast[i] * signal + noise,
                                  spec.spacing, name)
    else:
        for i, name in enumerate(spec.modalities):
            m = _ellipsoids(grid, lesions, spec.offsets[i])
            noise = rng.normal(0.0, spec.noise_sigma, spec.extents) if spec.noise_sigma else 0.0
            images[name] = Volume(spec.intensity_offset[i] + spec.contrast[i] * m + noise, spec.spacing, name)
            masks[name] = Volume(m.astype(np.float32), spec.spacing, name)
    return CaseRecord(case_id, images, masks, lesions=lesions)


def save_case(case: CaseRecord, root) -> ManifestEntry:
    """Write one case under ``root/<case_id>/`` and return its manifest entry."""
    root = Path(root)
    folder = root / case.case_id
    folder.mkdir(parents=True, exist_ok=True)
    images, masks = [], []
    for name, vol in case.images.items():
        images.append(write_volume(folder / f'{name}{VOLUME_SUFFIX}', vol).relative_to(root).as_posix())
    for name, vol in case.masks.items():
        masks.append(write_volume(folder / f'{name}_mask{VOLUME_SUFFIX}', vol).relative_to(root).as_posix())
    return ManifestEntry(case.case_id, case.split, tuple(images), tuple(masks))


def load_case(entry: ManifestEntry, root) -> CaseRecord:
    root = Path(root)
    images, masks = {}, {}
    for rel in entry.images:
        vol = read_volume(root / rel)
        images[vol.modality or Path(rel).stem] = vol
    for rel in entry.masks:
        vol = read_volume(root / rel)
        masks[vol.modality or Path(rel).stem] = vol
    return CaseRecord(entry.case_id, images, masks, entry.split)


def load_split(manifest: Manifest, split: str) -> List[CaseRecord]:
    return [load_case(e, manifest.root) for e in manifest.by_split(split)]


class CaseDataset(Dataset):
    """Random crops of normalised cases.

    Each item draws from its own generator seeded by ``(seed, epoch, index)``
    so the sample stream is reproducible regardless of worker scheduling.
    """

    def __init__(self, cases: Sequence[CaseRecord], crop: Sequence[int], transform=None,
                 positive_ratio: float = 0.5, seed: int = 0, samples_per_case: int = 1):
        self.cases = [normalize_case(c) for c in cases]
        self.crop = tuple(int(c) for c in crop)
        self.transform = transform
        self.positive_ratio = positive_ratio
        self.seed = seed
        self.samples_per_case = samples_per_case
        self.epoch = 0

    def set_epoch(self, epoch: int):
        self.epoch = epoch

    def __len__(self):
        return len(self.cases) * self.samples_per_case

    def __getitem__(self, idx):
        rng = np.random.default_rng([self.seed, self.epoch, idx])
        case = self.cases[idx % len(self.cases)]
        sample = sample_crop(case, self.crop, rng, self.positive_ratio)
        image, target = sample.image, sample.target
        if self.transform is not None:
            image, target = self.transform(image, target, rng)
        return torch.from_numpy(np.ascontiguousarray(image)), torch.from_numpy(np.ascontiguousarray(target))
