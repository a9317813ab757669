import logging
from dataclasses import dataclass
from typing import Callable, List, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import HwaBlock, Norm3d, SgcBlock, TfmBlock, conv_bias, conv_weight
from .errors import ConfigError, ShapeError
from .tensor import AXES, ConvSpec, add, conv3d, relu, sigmoid, transposed_conv3d

logger = logging.getLogger(__name__)

STAGES = 4


@dataclass
class ModelConfig:
    in_modalities: int = 2
    out_channels: int = 2
    base_width: int = 8
    stages: int = STAGES
    state_size: int = 4
    mlp_ratio: int = 2
    attention_budget: int = 4096
    pooled_attention: bool = True
    use_hwa: bool = True
    use_sgc: bool = True
    use_tfm: bool = True
    tfm_stages: Tuple[bool, ...] = (True, True, True, True)
    scan_mode: str = 'blocked'
    scan_chunk: int = 64
    norm_eps: float = 1e-5

    def __post_init__(self):
        self.tfm_stages = tuple(bool(f) for f in self.tfm_stages)
        if self.stages != STAGES:
            raise ConfigError(f'model.stages must be {STAGES}, got {self.stages}')
        for name in ('in_modalities', 'out_channels', 'base_width', 'state_size', 'mlp_ratio',
                     'attention_budget', 'scan_chunk'):
            if getattr(self, name) < 1:
                raise ConfigError(f'model.{name} must be positive, got {getattr(self, name)}')
        if len(self.tfm_stages) != self.stages:
            raise ConfigError(f'model.tfm_stages needs {self.stages} flags, got {len(self.tfm_stages)}')
        if self.scan_mode not in ('reference', 'blocked'):
            raise ConfigError(f"model.scan_mode must be 'reference' or 'blocked', got {self.scan_mode!r}")
        if self.norm_eps <= 0:
            raise ConfigError('model.norm_eps must be positive')

    @property
    def widths(self) -> List[int]:
        return [self.base_width * 2 ** i for i in range(self.stages)]

    @property
    def divisor(self) -> int:
        return 2 ** self.stages

    def flags(self) -> Tuple[bool, bool, bool]:
        return self.use_hwa, self.use_sgc, self.use_tfm


class PointwiseStem(nn.Module):
    """Stem used when the HWA block is switched off."""

    def __init__(self, in_channels, out_channels):
        super(PointwiseStem, self).__init__()
        self.weight = conv_weight(out_channels, in_channels, 1, 1, 1)
        self.bias = conv_bias(out_channels, in_channels)

    def forward(self, x):
        return conv3d(x, self.weight, self.bias)


class DownBlock(nn.Module):
    """Stride-2 depthwise-separable convolution, instance norm, ReLU."""

    def __init__(self, in_channels, out_channels, eps=1e-5):
        super(DownBlock, self).__init__()
        self.in_channels = in_channels
        self.dw_weight = conv_weight(in_channels, 1, 2, 2, 2)
        self.dw_bias = conv_bias(in_channels, 8)
        self.pw_weight = conv_weight(out_channels, in_channels, 1, 1, 1)
        self.pw_bias = conv_bias(out_channels, in_channels)
        self.norm = Norm3d(out_channels, eps)

    def forward(self, x):
        x = conv3d(x, self.dw_weight, self.dw_bias, ConvSpec.window(2, groups=self.in_channels))
        x = conv3d(x, self.pw_weight, self.pw_bias)
        return relu(self.norm(x))


class UpBlock(nn.Module):
    """Stride-2 transposed convolution, skip addition, depthwise-separable refinement."""

    def __init__(self, in_channels, out_channels, eps=1e-5):
        super(UpBlock, self).__init__()
        self.out_channels = out_channels
        self.up_weight = conv_weight(in_channels, out_channels, 2, 2, 2)
        self.up_bias = conv_bias(out_channels, in_channels * 8)
        self.skip_weight = conv_weight(out_channels, out_channels, 1, 1, 1)
        self.skip_bias = conv_bias(out_channels, out_channels)
        self.dw_weight = conv_weight(out_channels, 1, 3, 3, 3)
        self.dw_bias = conv_bias(out_channels, 27)
        self.pw_weight = conv_weight(out_channels, out_channels, 1, 1, 1)
        self.pw_bias = conv_bias(out_channels, out_channels)
        self.norm = Norm3d(out_channels, eps)

    def forward(self, x, skip):
        x = transposed_conv3d(x, self.up_weight, ConvSpec.window(2), self.up_bias)
        x = add(x, conv3d(skip, self.skip_weight, self.skip_bias))
        x = conv3d(x, self.dw_weight, self.dw_bias, ConvSpec.same(3, groups=self.out_channels))
        x = conv3d(x, self.pw_weight, self.pw_bias)
        return relu(self.norm(x))


class HwaUnetr(nn.Module):
    """Four-stage U-shaped network with HWA stem, SGC encoder blocks and TFM skips.

    The encoder stage i output has extents input / 2^(i+1). TFM processes each
    encoder output on its way to the decoder (stages 0-2 feed skip additions,
    stage 3 feeds the bridge). The head emits one sigmoid channel per target.
    """

    def __init__(self, config: ModelConfig):
        super(HwaUnetr, self).__init__()
        self.config = config
        c0 = config.base_width
        widths = config.widths
        eps = config.norm_eps

        if config.use_hwa:
            self.stem = HwaBlock(config.in_modalities, c0)
        else:
            self.stem = PointwiseStem(config.in_modalities, c0)

        self.downs = nn.ModuleList()
        prev = c0
        for w in widths:
            self.downs.append(DownBlock(prev, w, eps))
            prev = w

        self.encoder_sgc = nn.ModuleList([SgcBlock(w, config.mlp_ratio, eps) for w in widths]) \
            if config.use_sgc else None
        self.skip_tfm = nn.ModuleDict()
        if config.use_tfm:
            for i, (w, enabled) in enumerate(zip(widths, config.tfm_stages)):
                if enabled:
                    self.skip_tfm[str(i)] = TfmBlock(w, config.state_size, config.attention_budget,
                                                     config.pooled_attention, config.scan_mode, config.scan_chunk)
        self.bridge = SgcBlock(widths[-1], config.mlp_ratio, eps) if config.use_sgc else None

        ups = list(zip(widths[::-1], widths[-2::-1] + [c0]))
        self.ups = nn.ModuleList([UpBlock(i, o, eps) for i, o in ups])

        self.head_weight = conv_weight(config.out_channels, c0, 1, 1, 1)
        self.head_bias = conv_bias(config.out_channels, c0)

    def check_input(self, x):
        cfg = self.config
        if x.dim() != 5 or x.shape[1] != cfg.in_modalities:
            raise ShapeError(f'expected input [N, {cfg.in_modalities}, D, H, W], got {tuple(x.shape)}')
        for axis, n in zip(AXES, x.shape[2:]):
            if n % cfg.divisor:
                raise ShapeError(f'axis {axis} has extent {n}, not divisible by {cfg.divisor}; '
                                 f'pad the input with pad_to_multiple() first')

    def encode(self, x):
        """Return the stem output and the four encoder stage outputs."""
        self.check_input(x)
        stem = self.stem(x)
        feats = []
        y = stem
        for i, down in enumerate(self.downs):
            y = down(y)
            if self.encoder_sgc is not None:
                y = self.encoder_sgc[i](y)
            feats.append(y)
        return stem, feats

    def skip(self, i, feat):
        key = str(i)
        if key in self.skip_tfm:
            return self.skip_tfm[key](feat)
        return feat

    def forward(self, x):
        stem, feats = self.encode(x)
        skips = [self.skip(i, f) for i, f in enumerate(feats)]
        y = skips[-1]
        if self.bridge is not None:
            y = self.bridge(y)
        for up, skip in zip(self.ups, skips[-2::-1] + [stem]):
            y = up(y, skip)
        return sigmoid(conv3d(y, self.head_weight, self.head_bias))


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def pad_to_multiple(x, multiple):
    """Right-pad the spatial axes of ``[N, C, D, H, W]`` with zeros to a multiple of ``multiple``."""
    spatial = tuple(x.shape[2:])
    extra = [(-n) % multiple for n in spatial]
    if any(extra):
        x = F.pad(x, (0, extra[2], 0, extra[1], 0, extra[0]))
    return x, spatial


def crop_spatial(x, spatial):
    return x[(Ellipsis,) + tuple(slice(0, n) for n in spatial)]


def gaussian_importance(roi: Sequence[int], sigma_scale: float = 0.125, dtype=torch.float32):
    """Separable Gaussian patch weight, peak 1, sigma = roi * sigma_scale per axis."""
    profiles = []
    for n in roi:
        sigma = n * sigma_scale
        i = torch.arange(n, dtype=torch.float64)
        profiles.append(torch.exp(-(i - (n - 1) / 2.0) ** 2 / (2 * sigma ** 2)))
    g = profiles[0][:, None, None] * profiles[1][None, :, None] * profiles[2][None, None, :]
    g = g / g.max()
    g[g == 0] = g[g > 0].min()
    return g.to(dtype)


def tile_starts(extent: int, roi: int, overlap: float) -> List[int]:
    if roi >= extent:
        return [0]
    step = max(1, int(roi * (1 - overlap)))
    starts = list(range(0, extent - roi + 1, step))
    if starts[-1] != extent - roi:
        starts.append(extent - roi)
    return starts


def tile_grid(spatial, roi, overlap):
    """Tile corner positions in raster order."""
    return [(d, h, w)
            for d in tile_starts(spatial[0], roi[0], overlap)
            for h in tile_starts(spatial[1], roi[1], overlap)
            for w in tile_starts(spatial[2], roi[2], overlap)]


@torch.no_grad()
def sliding_window_infer(volume, predictor: Callable, roi: Sequence[int], overlap: float = 0.5,
                         multiple: int = 2 ** STAGES, sigma_scale: float = 0.125):
    """Blend ``predictor`` outputs over overlapping ``roi`` tiles of a ``[C, D, H, W]`` stack.

    The stack is zero-padded to a multiple of ``multiple`` per axis, tiled in
    raster order and blended with Gaussian weights; the result is cropped back
    to the input extents as ``[K, D, H, W]``.
    """
    if not 0 <= overlap < 1:
        raise ConfigError(f'overlap must be in [0, 1), got {overlap}')
    roi = tuple(int(r) for r in roi)
    volume = torch.as_tensor(volume)
    if volume.dim() != 4 or len(roi) != 3:
        raise ShapeError(f'expected a [C, D, H, W] stack and a 3-axis roi, got {tuple(volume.shape)} / {roi}')
    x, spatial = pad_to_multiple(volume[None], multiple)
    padded = tuple(x.shape[2:])
    for axis, r, n in zip(AXES, roi, padded):
        if r > n:
            raise ShapeError(f'roi extent {r} along axis {axis} exceeds the padded volume extent {n}')

    weight = gaussian_importance(roi, sigma_scale, dtype=x.dtype)
    out = None
    norm = x.new_zeros(padded)
    for d, h, w in tile_grid(padded, roi, overlap):
        window = (slice(d, d + roi[0]), slice(h, h + roi[1]), slice(w, w + roi[2]))
        pred = predictor(x[(slice(None), slice(None)) + window])
        if out is None:
            out = x.new_zeros((pred.shape[1],) + padded)
        out[(slice(None),) + window] += pred[0] * weight
        norm[window] += weight
    return crop_spatial(out / norm, spatial)
