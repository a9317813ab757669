"""Orientation-aware flattening and the diagonal selective state-space scan.

A feature map ``[N, C, D, H, W]`` is read as a sequence ``[N, L, C]`` in one of
three voxel orders, scanned with an input-dependent linear recurrence and
written back in the same order.
"""
import enum
import logging
import math
from typing import NamedTuple, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .errors import ConfigError, ShapeError
from .tensor import _check_rank, _emit

logger = logging.getLogger(__name__)


class Orientation(enum.Enum):
    FORWARD = 'forward'
    REVERSE = 'reverse'
    INTER_SLICE = 'inter_slice'


def index_map(spatial: Sequence[int], orientation: Orientation) -> Tensor:
    """Raster index of the voxel visited at each sequence position."""
    d, h, w = (int(s) for s in spatial)
    raster = torch.arange(d * h * w)
    if orientation is Orientation.FORWARD:
        return raster
    if orientation is Orientation.REVERSE:
        return raster.flip(0)
    if orientation is Orientation.INTER_SLICE:
        # h, then w, with depth innermost
        return raster.view(d, h, w).permute(1, 2, 0).reshape(-1)
    raise ConfigError(f'unknown orientation {orientation!r}')


def flatten(x: Tensor, orientation: Orientation) -> Tensor:
    _check_rank(x, 5, 'flatten')
    n, c = x.shape[:2]
    idx = index_map(x.shape[2:], orientation).to(x.device)
    return x.reshape(n, c, -1).index_select(2, idx).transpose(1, 2)


def unflatten(seq: Tensor, orientation: Orientation, spatial: Sequence[int]) -> Tensor:
    _check_rank(seq, 3, 'unflatten')
    n, length, c = seq.shape
    if length != math.prod(spatial):
        raise ShapeError(f'unflatten: sequence length {length} does not match spatial extents {tuple(spatial)}')
    inverse = torch.argsort(index_map(spatial, orientation)).to(seq.device)
    return seq.transpose(1, 2).index_select(2, inverse).reshape(n, c, *spatial)


class SsmParams(NamedTuple):
    A: Tensor          # [C, N], strictly negative
    w_delta: Tensor    # [C, C]
    b_delta: Tensor    # [C]
    w_b: Tensor        # [N, C]
    w_c: Tensor        # [N, C]
    d: Tensor          # [C]


def _validate(seq: Tensor, p: SsmParams):
    _check_rank(seq, 3, 'selective_scan input')
    c = seq.shape[2]
    if p.A.dim() != 2 or p.A.shape[0] != c:
        raise ShapeError(f'selective_scan: A has shape {tuple(p.A.shape)}, expected [{c}, N]')
    if not bool((p.A < 0).all()):
        raise ConfigError('selective_scan: every entry of A must be strictly negative')
    state = p.A.shape[1]
    if tuple(p.w_delta.shape) != (c, c) or tuple(p.b_delta.shape) != (c,):
        raise ShapeError('selective_scan: delta projection does not match the channel count')
    if tuple(p.w_b.shape) != (state, c) or tuple(p.w_c.shape) != (state, c):
        raise ShapeError('selective_scan: B/C projections must be [N, C]')
    if tuple(p.d.shape) != (c,):
        raise ShapeError('selective_scan: skip gain must have one entry per channel')


def _project(seq: Tensor, p: SsmParams) -> Tuple[Tensor, Tensor, Tensor]:
    delta = F.softplus(F.linear(seq, p.w_delta, p.b_delta))   # [N, L, C]
    b = F.linear(seq, p.w_b)                                   # [N, L, N_state]
    c = F.linear(seq, p.w_c)
    return delta, b, c


def _scan_reference(seq, p, delta, b, c, return_states):
    n, length, ch = seq.shape
    h = seq.new_zeros(n, ch, p.A.shape[1])
    ys, states = [], []
    for t in range(length):
        dt = delta[:, t, :, None]
        h = torch.exp(dt * p.A) * h + dt * b[:, t, None, :] * seq[:, t, :, None]
        ys.append((h * c[:, t, None, :]).sum(-1))
        if return_states:
            states.append(h)
    y = torch.stack(ys, dim=1) + p.d * seq
    return y, (torch.stack(states, dim=1) if return_states else None)


def _scan_blocked(seq, p, delta, b, c, chunk):
    n, length, ch = seq.shape
    h = seq.new_zeros(n, ch, p.A.shape[1])
    ys = []
    for start in range(0, length, chunk):
        stop = min(start + chunk, length)
        t = stop - start
        dt = delta[:, start:stop, :, None]                                    # [N, T, C, 1]
        log_decay = torch.cumsum(dt * p.A, dim=1)                             # [N, T, C, S]
        u = dt * b[:, start:stop, None, :] * seq[:, start:stop, :, None]      # [N, T, C, S]
        causal = torch.ones(t, t, dtype=torch.bool, device=seq.device).tril()
        pair = log_decay[:, :, None] - log_decay[:, None, :]                  # [N, T(t), T(s), C, S]
        pair = pair.masked_fill(~causal[None, :, :, None, None], float('-inf'))
        states = torch.einsum('ntscz,nscz->ntcz', torch.exp(pair), u) + torch.exp(log_decay) * h[:, None]
        ys.append((states * c[:, start:stop, None, :]).sum(-1))
        h = states[:, -1]
    return torch.cat(ys, dim=1) + p.d * seq


def selective_scan(seq: Tensor, p: SsmParams, mode: str = 'reference', chunk: int = 64,
                   return_states: bool = False):
    """Run h_t = exp(dt_t A) h_{t-1} + dt_t B_t x_t, y_t = <C_t, h_t> + D x_t from h_0 = 0.

    ``mode='reference'`` steps through the sequence one position at a time;
    ``mode='blocked'`` evaluates ``chunk`` positions at once and carries the
    state between chunks. ``return_states`` (reference mode only) also returns
    the ``[N, L, C, N_state]`` hidden states.
    """
    _validate(seq, p)
    delta, b, c = _project(seq, p)
    if mode == 'reference':
        y, states = _scan_reference(seq, p, delta, b, c, return_states)
        y = _emit('selective_scan', y)
        return (y, states) if return_states else y
    if mode == 'blocked':
        if return_states:
            raise ConfigError('selective_scan: hidden states are only returned in reference mode')
        if chunk < 1:
            raise ConfigError(f'selective_scan: chunk must be positive, got {chunk}')
        return _emit('selective_scan', _scan_blocked(seq, p, delta, b, c, chunk))
    raise ConfigError(f'selective_scan: unknown mode {mode!r}')


def state_bound(p: SsmParams, delta_max: float, b_max: float, x_max: float = 1.0) -> Tensor:
    """Per-(channel, state) ceiling on |h_t| for |x| <= x_max, dt <= delta_max and |B| <= b_max."""
    rate = -p.A
    return b_max * x_max * torch.exp(delta_max * rate) / rate


class SelectiveSSM(nn.Module):
    """Learnable parameters of one selective scan over ``channels`` features."""

    def __init__(self, channels, state_size=4, mode='blocked', chunk=64, dt_min=1e-3, dt_max=1e-1):
        super(SelectiveSSM, self).__init__()
        self.channels = channels
        self.state_size = state_size
        self.mode = mode
        self.chunk = chunk

        # A = -exp(a_log) starts at -(1..N) for every channel
        a = torch.arange(1, state_size + 1, dtype=torch.float32).repeat(channels, 1)
        self.a_log = nn.Parameter(torch.log(a))
        bound = 1.0 / math.sqrt(channels)
        self.w_delta = nn.Parameter(torch.empty(channels, channels).uniform_(-bound, bound) * 0.1)
        dt = torch.exp(torch.rand(channels) * (math.log(dt_max) - math.log(dt_min)) + math.log(dt_min))
        self.b_delta = nn.Parameter(dt + torch.log(-torch.expm1(-dt)))  # inverse softplus
        self.w_b = nn.Parameter(torch.empty(state_size, channels).uniform_(-bound, bound))
        self.w_c = nn.Parameter(torch.empty(state_size, channels).uniform_(-bound, bound))
        self.d = nn.Parameter(torch.ones(channels))

    @property
    def params(self) -> SsmParams:
        return SsmParams(-torch.exp(self.a_log), self.w_delta, self.b_delta, self.w_b, self.w_c, self.d)

    def forward(self, seq: Tensor) -> Tensor:
        return selective_scan(seq, self.params, mode=self.mode, chunk=self.chunk)


def ma(x: Tensor, orientation: Orientation, ssm: SelectiveSSM) -> Tensor:
    """Flatten in ``orientation``, scan, and restore the volume layout."""
    return unflatten(ssm(flatten(x, orientation)), orientation, x.shape[2:])
