import torch
import torch.nn as nn

from .errors import ShapeError


def _check(prob, target, what):
    if prob.shape != target.shape:
        raise ShapeError(f'{what}: prediction {tuple(prob.shape)} and target {tuple(target.shape)} differ')
    if prob.dim() < 3:
        raise ShapeError(f'{what}: expected [N, C, ...] tensors, got {tuple(prob.shape)}')


def soft_dice_loss(prob, target, smooth=1e-5):
    """1 - (2 sum(p g) + s) / (sum(p^2) + sum(g^2) + s), per sample and channel, then averaged."""
    _check(prob, target, 'soft_dice_loss')
    dims = tuple(range(2, prob.dim()))
    inter = (prob * target).sum(dims)
    denom = (prob * prob).sum(dims) + (target * target).sum(dims)
    return (1 - (2 * inter + smooth) / (denom + smooth)).mean()


def focal_loss(prob, target, gamma=2.0, alpha=0.25, eps=1e-7):
    _check(prob, target, 'focal_loss')
    p = prob.clamp(eps, 1 - eps)
    pt = p * target + (1 - p) * (1 - target)
    return (-alpha * (1 - pt) ** gamma * torch.log(pt)).mean()


class CompositeLoss(nn.Module):
    def __init__(self, lambda_dice=1.0, lambda_focal=1.0, gamma=2.0, alpha=0.25, smooth=1e-5):
        super(CompositeLoss, self).__init__()
        self.lambda_dice = lambda_dice
        self.lambda_focal = lambda_focal
        self.gamma = gamma
        self.alpha = alpha
        self.smooth = smooth

    def terms(self, prob, target):
        return {
            'dice_loss': soft_dice_loss(prob, target, self.smooth),
            'focal_loss': focal_loss(prob, target, self.gamma, self.alpha),
        }

    def combine(self, terms):
        return self.lambda_dice * terms['dice_loss'] + self.lambda_focal * terms['focal_loss']

    def forward(self, prob, target):
        return self.combine(self.terms(prob, target))
