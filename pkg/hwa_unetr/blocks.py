import logging
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError
from .ssm import Orientation, SelectiveSSM, flatten, ma, unflatten
from .tensor import (ConvSpec, add, concat, conv3d, instance_norm3d, matmul, mlp, scale, softmax,
                     split, trilinear_resize)

logger = logging.getLogger(__name__)

BRANCH_WINDOWS = (1, 2, 4, 8)


def conv_weight(*shape):
    """Parameter initialised the way ``nn.Conv3d`` initialises its kernels."""
    w = torch.empty(*shape)
    nn.init.kaiming_uniform_(w, a=math.sqrt(5))
    return nn.Parameter(w)


def conv_bias(channels, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return nn.Parameter(torch.empty(channels).uniform_(-bound, bound))


class Norm3d(nn.Module):
    """Affine instance normalisation.

    Single-voxel feature maps (a 16-voxel axis after four halvings) have no
    variance; they only get the affine part.
    """

    def __init__(self, channels, eps=1e-5):
        super(Norm3d, self).__init__()
        self.eps = eps
        self.gain = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        if math.prod(x.shape[2:]) < 2:
            view = (1, -1, 1, 1, 1)
            return x * self.gain.view(view) + self.bias.view(view)
        return instance_norm3d(x, self.eps, self.gain, self.bias)


class HwaBlock(nn.Module):
    """Hierarchical window aggregation over the input modalities.

    Every modality passes through depthwise window convolutions with
    r = k in ``BRANCH_WINDOWS``; each branch is resized back to the input
    extents and the four branches are stacked. The per-modality stacks are
    mixed by learnable scalars and projected to ``out_channels``.
    """

    def __init__(self, in_modalities, out_channels):
        super(HwaBlock, self).__init__()
        if in_modalities < 1:
            raise ConfigError(f'HwaBlock needs at least one modality, got {in_modalities}')
        self.in_modalities = in_modalities
        self.out_channels = out_channels

        for r in BRANCH_WINDOWS:
            self.register_parameter(f'dw{r}_weight', conv_weight(in_modalities, 1, r, r, r))
            self.register_parameter(f'dw{r}_bias', conv_bias(in_modalities, r ** 3))
        self.modality_weights = nn.Parameter(torch.full((in_modalities,), 1.0 / in_modalities))
        branches = len(BRANCH_WINDOWS)
        self.proj_weight = conv_weight(out_channels, branches, 1, 1, 1)
        self.proj_bias = conv_bias(out_channels, branches)

    def aggregate_windows(self, x):
        """Per-modality window stacks, each ``[N, 4, D, H, W]``."""
        if x.dim() != 5 or x.shape[1] != self.in_modalities:
            raise ShapeError(f'HwaBlock expects [N, {self.in_modalities}, D, H, W], got {tuple(x.shape)}')
        spatial = tuple(x.shape[2:])
        views = []
        for i, modality in enumerate(split(x, 1, self.in_modalities)):
            branches = []
            for r in BRANCH_WINDOWS:
                w = getattr(self, f'dw{r}_weight')[i:i + 1]
                b = getattr(self, f'dw{r}_bias')[i:i + 1]
                try:
                    y = conv3d(modality, w, b, ConvSpec.window(r))
                except ShapeError as exc:
                    raise ShapeError(f'HWA branch r=k={r}: {exc}') from exc
                branches.append(trilinear_resize(y, spatial))
            views.append(concat(branches, axis=1))
        return views

    def fuse(self, views):
        """Weighted modality sum, reduced in sorted order so it does not depend on modality order."""
        weighted = [scale(v, self.modality_weights[i]) for i, v in enumerate(views)]
        if len(weighted) == 1:
            return weighted[0]
        ordered = torch.sort(torch.stack(weighted), dim=0).values.unbind(0)
        fused = ordered[0]
        for term in ordered[1:]:
            fused = add(fused, term)
        return fused

    def forward(self, x):
        return conv3d(self.fuse(self.aggregate_windows(x)), self.proj_weight, self.proj_bias)


class SgcBlock(nn.Module):
    """Stratified group convolution: two depthwise branches fused through a residual MLP."""

    def __init__(self, channels, mlp_ratio=2, eps=1e-5):
        super(SgcBlock, self).__init__()
        self.channels = channels
        hidden = channels * mlp_ratio

        self.dw3_weight = conv_weight(channels, 1, 3, 3, 3)
        self.dw3_bias = conv_bias(channels, 27)
        self.norm1 = Norm3d(channels, eps)
        self.dw1_weight = conv_weight(channels, 1, 1, 1, 1)
        self.dw1_bias = conv_bias(channels, 1)
        self.norm2 = Norm3d(channels, eps)
        self.pw_weight = conv_weight(channels, channels, 1, 1, 1)
        self.pw_bias = conv_bias(channels, channels)
        self.mlp_w1 = conv_weight(hidden, channels)
        self.mlp_b1 = conv_bias(hidden, channels)
        self.mlp_w2 = conv_weight(channels, hidden)
        self.mlp_b2 = conv_bias(channels, hidden)

    def forward(self, x):
        c = self.channels
        x1 = self.norm1(conv3d(x, self.dw3_weight, self.dw3_bias, ConvSpec.same(3, groups=c)))
        x1 = self.norm2(conv3d(x1, self.dw1_weight, self.dw1_bias, ConvSpec(groups=c)))
        x2 = conv3d(x, self.pw_weight, self.pw_bias)
        return add(x, mlp(add(x1, x2), self.mlp_w1, self.mlp_b1, self.mlp_w2, self.mlp_b2, axis=1))


class TfmBlock(nn.Module):
    """Tri-orientated fusion: three directional scans mixed with scaled dot-product attention."""

    def __init__(self, channels, state_size=4, attention_budget=4096, pooled_attention=True,
                 scan_mode='blocked', scan_chunk=64):
        super(TfmBlock, self).__init__()
        self.channels = channels
        self.attention_budget = attention_budget
        self.pooled_attention = pooled_attention

        self.ssm_forward = SelectiveSSM(channels, state_size, scan_mode, scan_chunk)
        self.ssm_reverse = SelectiveSSM(channels, state_size, scan_mode, scan_chunk)
        self.ssm_inter_slice = SelectiveSSM(channels, state_size, scan_mode, scan_chunk)
        self.fuse_weight = conv_weight(channels, 2, 1, 1, 1)
        self.fuse_bias = conv_bias(channels, 2)

    def mamba_views(self, x):
        return (ma(x, Orientation.FORWARD, self.ssm_forward),
                ma(x, Orientation.REVERSE, self.ssm_reverse),
                ma(x, Orientation.INTER_SLICE, self.ssm_inter_slice))

    def _keys_values(self, k, v):
        length = math.prod(k.shape[2:])
        if length <= self.attention_budget:
            return k, v
        if not self.pooled_attention:
            raise ConfigError(f'TFM attention over {length} tokens exceeds the budget of '
                              f'{self.attention_budget}; enable pooled attention (model.pooled_attention = true)')
        return (F.avg_pool3d(k, 2, ceil_mode=True), F.avg_pool3d(v, 2, ceil_mode=True))

    def attention_weights(self, q, k):
        """Row-stochastic ``[N, L, L_kv]`` matrix S(q k^T / sqrt(C))."""
        qs = flatten(q, Orientation.FORWARD)
        ks = flatten(k, Orientation.FORWARD)
        return softmax(scale(matmul(qs, ks.transpose(1, 2)), 1.0 / math.sqrt(self.channels)), axis=-1)

    def attention(self, q, k, v):
        k, v = self._keys_values(k, v)
        out = matmul(self.attention_weights(q, k), flatten(v, Orientation.FORWARD))
        return unflatten(out, Orientation.FORWARD, q.shape[2:])

    def forward(self, x):
        if x.dim() != 5 or x.shape[1] != self.channels:
            raise ShapeError(f'TfmBlock expects [N, {self.channels}, D, H, W], got {tuple(x.shape)}')
        mq, mk, mv = self.mamba_views(x)
        mba = add(add(mq, mk), mv)
        att = self.attention(mq, mk, mv)
        c = self.channels
        # channel 2i is X_mba[i], channel 2i + 1 is X_att[i]
        order = torch.arange(2 * c, device=x.device).view(2, c).t().reshape(-1)
        pairs = concat([mba, att], axis=1).index_select(1, order)
        return conv3d(pairs, self.fuse_weight, self.fuse_bias, ConvSpec(groups=c))
