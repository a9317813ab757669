"""Dice overlap and 95th-percentile Hausdorff distance, plus the report that aggregates them."""
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import ShapeError

logger = logging.getLogger(__name__)

# 6-connectivity
_FACES = ndimage.generate_binary_structure(3, 1)


def _pair(pred, gt, what):
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError(f'{what}: prediction {pred.shape} and ground truth {gt.shape} differ')
    return pred, gt


def binarize(prob, threshold=0.5):
    return np.asarray(prob) > threshold


def dice(pred, gt) -> float:
    """Dice in percent; two empty masks score 100."""
    pred, gt = _pair(pred, gt, 'dice')
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 100.0
    return 100.0 * 2 * int(np.logical_and(pred, gt).sum()) / total


def surface(mask) -> np.ndarray:
    """Voxels of ``mask`` with at least one face-adjacent background voxel (outside counts as background)."""
    mask = np.asarray(mask).astype(bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_FACES, border_value=0)


def surface_distances(pred, gt, spacing=(1.0, 1.0, 1.0)) -> Optional[np.ndarray]:
    """Symmetric set of nearest surface-to-surface distances in mm, or None if a mask is empty."""
    pred, gt = _pair(pred, gt, 'surface_distances')
    if not pred.any() or not gt.any():
        return None
    sp, sg = surface(pred), surface(gt)
    to_gt = ndimage.distance_transform_edt(~sg, sampling=spacing)
    to_pred = ndimage.distance_transform_edt(~sp, sampling=spacing)
    return np.concatenate([to_gt[sp], to_pred[sg]])


def hd95(pred, gt, spacing=(1.0, 1.0, 1.0), percentile=95.0) -> Optional[float]:
    """Percentile (linear interpolation) of the symmetric surface distances; None when undefined."""
    distances = surface_distances(pred, gt, spacing)
    if distances is None:
        return None
    return float(np.percentile(distances, percentile))


def hausdorff(pred, gt, spacing=(1.0, 1.0, 1.0)) -> Optional[float]:
    return hd95(pred, gt, spacing, percentile=100.0)


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


@dataclass
class CaseMetrics:
    case_id: str
    dice: List[float]
    hd95: List[Optional[float]]
    empty: List[bool]

    @property
    def mean_hd95(self) -> Optional[float]:
        return _mean(self.hd95)


@dataclass
class MetricReport:
    channels: Tuple[str, ...]
    cases: List[CaseMetrics] = field(default_factory=list)

    def add_case(self, case_id, pred, gt, spacing=(1.0, 1.0, 1.0)) -> CaseMetrics:
        """Score binary stacks ``[K, D, H, W]`` channel by channel."""
        pred, gt = _pair(pred, gt, 'add_case')
        if pred.shape[0] != len(self.channels):
            raise ShapeError(f'case {case_id}: {pred.shape[0]} channels, report expects {len(self.channels)}')
        scores, distances, empty = [], [], []
        for k, name in enumerate(self.channels):
            scores.append(dice(pred[k], gt[k]))
            distances.append(hd95(pred[k], gt[k], spacing))
            empty.append(not pred[k].any() and not gt[k].any())
            if distances[-1] is None:
                logger.warning('case %s channel %s: HD95 undefined (empty mask)', case_id, name)
        record = CaseMetrics(case_id, scores, distances, empty)
        self.cases.append(record)
        return record

    def mean_dice(self) -> List[float]:
        if not self.cases:
            return [float('nan')] * len(self.channels)
        return [float(np.mean([c.dice[k] for c in self.cases])) for k in range(len(self.channels))]

    def avg_dice(self) -> float:
        return float(np.mean(self.mean_dice()))

    def mean_hd95(self) -> Optional[float]:
        """HD95 averaged over channels within a case, then over cases."""
        return _mean([c.mean_hd95 for c in self.cases])

    @property
    def undefined_hd95(self) -> int:
        return sum(v is None for c in self.cases for v in c.hd95)

    @property
    def empty_pairs(self) -> int:
        return sum(sum(c.empty) for c in self.cases)

    def header(self) -> List[str]:
        return ['method'] + list(self.channels) + ['Avg', 'HD95']

    def row(self, label: str) -> List[str]:
        hd = self.mean_hd95()
        return ([label] + [f'{d:.2f}' for d in self.mean_dice()] + [f'{self.avg_dice():.2f}']
                + ['undefined' if hd is None else f'{hd:.2f}'])

    def summary(self, label: str) -> str:
        return ' '.join(f'{k}={v}' for k, v in zip(self.header(), self.row(label)))

    def write_table(self, path, label: str) -> Path:
        return write_tsv(path, self.header(), [self.row(label)])

    def write_cases(self, path) -> Path:
        header = ['case_id'] + [f'dice_{c}' for c in self.channels] + [f'hd95_{c}' for c in self.channels]
        rows = [[c.case_id] + [f'{d:.4f}' for d in c.dice]
                + ['undefined' if h is None else f'{h:.4f}' for h in c.hd95] for c in self.cases]
        return write_tsv(path, header, rows)


def write_tsv(path, header: Sequence[str], rows: Sequence[Sequence[str]]) -> Path:
    path = Path(path)
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f, delimiter='\t', lineterminator='\n')
        writer.writerow(header)
        writer.writerows(rows)
    return path
