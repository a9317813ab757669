import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
import torch
from torch.utils.data import DataLoader
from torchmetrics.classification import BinaryF1Score

from .checkpoint import save_checkpoint
from .dataset import CaseDataset, CaseRecord, Manifest, load_split
from .errors import ConfigError, DataError, NumericalError
from .losses import CompositeLoss
from .metrics import MetricReport, binarize
from .model import STAGES, sliding_window_infer
from .tensor import Tape, first_non_finite
from .transforms import build_augmentation, case_arrays, normalize_case
from .utils import MetricLogger, SmoothedValue, save_result

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    weight_decay: float = 0.4
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    epochs: int = 300
    batch_size: int = 2
    crop: Tuple[int, int, int] = (16, 32, 32)
    warmup_fraction: float = 0.05
    flip_prob: float = 0.5
    intensity_prob: float = 0.2
    intensity_scale: float = 0.1
    intensity_shift: float = 0.1
    positive_ratio: float = 0.5
    lambda_dice: float = 1.0
    lambda_focal: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    dice_smooth: float = 1e-5
    grad_clip: float = 0.0
    samples_per_case: int = 1
    num_workers: int = 0
    val_overlap: float = 0.5
    threshold: float = 0.5
    print_freq: int = 10
    seed: int = 0

    def __post_init__(self):
        self.crop = tuple(int(c) for c in self.crop)
        self.betas = tuple(float(b) for b in self.betas)
        for name in ('flip_prob', 'intensity_prob', 'positive_ratio', 'warmup_fraction', 'threshold'):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f'train.{name} must lie in [0, 1], got {getattr(self, name)}')
        if self.lr0 <= 0:
            raise ConfigError(f'train.lr0 must be positive, got {self.lr0}')
        if self.weight_decay < 0:
            raise ConfigError('train.weight_decay must be non-negative')
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f'train.betas must be two values in [0, 1), got {self.betas}')
        for name in ('epochs', 'batch_size', 'samples_per_case', 'print_freq'):
            if getattr(self, name) < 1:
                raise ConfigError(f'train.{name} must be positive, got {getattr(self, name)}')
        if self.num_workers < 0:
            raise ConfigError('train.num_workers must be non-negative')
        if len(self.crop) != 3 or any(c < 1 or c % 2 ** STAGES for c in self.crop):
            raise ConfigError(f'train.crop extents must be positive multiples of {2 ** STAGES}, got {self.crop}')
        if not 0.0 <= self.val_overlap < 1.0:
            raise ConfigError(f'train.val_overlap must lie in [0, 1), got {self.val_overlap}')
        if self.grad_clip < 0:
            raise ConfigError('train.grad_clip must be non-negative')


def lr_at(step, total_steps, warmup_steps, lr0):
    """Linear warmup from 0 to ``lr0``, then cosine annealing to 0 at ``total_steps``."""
    if warmup_steps > 0 and step < warmup_steps:
        return lr0 * step / warmup_steps
    if total_steps <= warmup_steps:
        return lr0
    progress = min(1.0, (step - warmup_steps) / (total_steps - warmup_steps))
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * progress))


def build_criterion(cfg: TrainConfig) -> CompositeLoss:
    return CompositeLoss(cfg.lambda_dice, cfg.lambda_focal, cfg.focal_gamma, cfg.focal_alpha, cfg.dice_smooth)


def build_optimizer(model, cfg: TrainConfig):
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr0, betas=cfg.betas, eps=cfg.adam_eps,
                             weight_decay=cfg.weight_decay)


def build_scheduler(optimizer, total_steps, warmup_steps):
    return torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda step: lr_at(step, total_steps, warmup_steps, 1.0))


def adamw_step(optimizer, lr=None, weight_decay=None):
    """One decoupled-weight-decay Adam update on the gradients already stored in ``.grad``."""
    for group in optimizer.param_groups:
        if lr is not None:
            group['lr'] = lr
        if weight_decay is not None:
            group['weight_decay'] = weight_decay
    optimizer.step()


def optimizer_state(model, optimizer) -> Dict[str, Dict[str, torch.Tensor]]:
    """Moment buffers and step counter keyed by parameter name."""
    state = {}
    for name, p in model.named_parameters():
        if p in optimizer.state:
            s = optimizer.state[p]
            state[name] = {'exp_avg': s['exp_avg'], 'exp_avg_sq': s['exp_avg_sq'], 'step': s['step']}
    return state


def train_one_epoch(model, criterion, optimizer, scheduler, data_loader, device, epoch,
                    print_freq=10, grad_clip=0.0):
    model.train()
    metric_logger = MetricLogger(delimiter="  ")
    metric_logger.add_meter('lr', SmoothedValue(window_size=1, fmt='{value:.6f}'))
    header = 'Epoch: [{}]'.format(epoch)
    running_dice = BinaryF1Score().to(device)

    losses, lr = [], optimizer.param_groups[0]['lr']
    for step, (images, targets) in enumerate(metric_logger.log_every(data_loader, print_freq, header)):
        images, targets = images.to(device), targets.to(device)

        with Tape() as tape:
            prob = model(images)
            loss_dict = criterion.terms(prob, targets)
            loss = criterion.combine(loss_dict)
        logger.debug('%s step %d: %d ops on the tape', header, step, len(tape))
        loss_value = loss.item()

        if not math.isfinite(loss_value):
            culprit = first_non_finite([('prediction', prob)] + list(loss_dict.items())) or 'loss'
            raise NumericalError(f'loss is {loss_value} at epoch {epoch} step {step}; '
                                 f'first non-finite tensor: {culprit}')

        optimizer.zero_grad()
        loss.backward()
        culprit = first_non_finite((f'grad:{n}', p.grad) for n, p in model.named_parameters())
        if culprit is not None:
            raise NumericalError(f'{culprit} is not finite at epoch {epoch} step {step}')
        if grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)

        lr = optimizer.param_groups[0]['lr']
        adamw_step(optimizer)
        scheduler.step()

        running_dice.update(prob.detach().flatten(), targets.flatten().long())
        metric_logger.update(loss=loss_value, **{k: v.item() for k, v in loss_dict.items()})
        metric_logger.update(lr=lr)
        losses.append(loss_value)

    dice_value = float(running_dice.compute())
    state = optimizer_state(model, optimizer)
    if state:
        logger.debug('%s optimizer at step %d', header, int(next(iter(state.values()))['step']))
    logger.info('%s loss %.6f dice %.4f', header, float(np.mean(losses)), dice_value)
    return {'loss': float(np.mean(losses)), 'dice': dice_value, 'lr': lr}


@torch.no_grad()
def predict_case(model, case: CaseRecord, roi: Sequence[int], overlap=0.5, device='cpu') -> np.ndarray:
    """Probability stack ``[K, D, H, W]`` on the case's first-modality grid."""
    model.eval()
    image, _ = case_arrays(normalize_case(case))
    prob = sliding_window_infer(torch.from_numpy(image), lambda t: model(t.to(device)).cpu(), roi, overlap)
    return prob.numpy()


def evaluate(model, cases: Sequence[CaseRecord], roi, overlap=0.5, threshold=0.5, device='cpu',
             channels=None) -> MetricReport:
    if not cases:
        raise DataError('nothing to evaluate: no cases')
    report = MetricReport(tuple(channels or cases[0].channels))
    for case in cases:
        prob = predict_case(model, case, roi, overlap, device)
        _, target = case_arrays(case)
        report.add_case(case.case_id, binarize(prob, threshold), target, case.reference.spacing)
    return report


def train(model, manifest: Manifest, cfg: TrainConfig, run_dir, device='cpu') -> List[dict]:
    """Run the full recipe; write metrics.jsonl, best/last checkpoints and result.png into ``run_dir``."""
    run_dir = Path(run_dir)
    train_cases = load_split(manifest, 'train')
    val_cases = load_split(manifest, 'val')
    if not train_cases:
        raise DataError('manifest has no training cases')

    dataset = CaseDataset(train_cases, cfg.crop, build_augmentation(cfg), cfg.positive_ratio, cfg.seed,
                          cfg.samples_per_case)
    data_loader = DataLoader(dataset, batch_size=cfg.batch_size, shuffle=True, num_workers=cfg.num_workers,
                             generator=torch.Generator().manual_seed(cfg.seed))
    total_steps = cfg.epochs * len(data_loader)
    warmup_steps = int(round(cfg.warmup_fraction * total_steps))

    model.to(device)
    criterion = build_criterion(cfg)
    optimizer = build_optimizer(model, cfg)
    scheduler = build_scheduler(optimizer, total_steps, warmup_steps)
    logger.info('training on %d cases (%d validation), %d steps, warmup %d',
                len(train_cases), len(val_cases), total_steps, warmup_steps)

    history, best = [], -math.inf
    for epoch in range(cfg.epochs):
        dataset.set_epoch(epoch)
        stats = train_one_epoch(model, criterion, optimizer, scheduler, data_loader, device, epoch,
                                cfg.print_freq, cfg.grad_clip)
        record = {'epoch': epoch + 1, 'lr': stats['lr'], 'train_loss': stats['loss'],
                  'train_dice': stats['dice'], 'val_dice': None, 'val_avg': None}
        score = epoch
        if val_cases:
            report = evaluate(model, val_cases, cfg.crop, cfg.val_overlap, cfg.threshold, device)
            record['val_dice'] = report.mean_dice()
            record['val_avg'] = score = report.avg_dice()
            logger.info('validation %s', report.summary(f'epoch{epoch + 1}'))
        with open(run_dir / 'metrics.jsonl', 'a', encoding='utf-8') as f:
            f.write(json.dumps(record) + '\n')
        history.append(record)

        if score > best:
            best = score
            save_checkpoint(model, run_dir / 'best.hwau')
        save_checkpoint(model, run_dir / 'last.hwau')
        save_result(history, run_dir)
    return history
