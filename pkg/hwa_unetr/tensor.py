"""Dense tensor operators used by every block of the network.

Tensors are ``torch.Tensor`` values laid out as ``[N, C, D, H, W]``. Gradients
come from torch's autograd graph; ``Tape`` records which operators ran while it
is active, and every operator refuses to hand back non-finite values.
"""
import contextvars
import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F
from torch import Tensor
from torch.nn.modules.utils import _triple

from .errors import ConfigError, NumericalError, ShapeError

logger = logging.getLogger(__name__)

AXES = ('D', 'H', 'W')

_ACTIVE_TAPE = contextvars.ContextVar('hwa_unetr_tape', default=None)


@dataclass(frozen=True)
class TapeRecord:
    index: int
    op: str
    shape: Tuple[int, ...]


class Tape:
    """Ordered record of the operators evaluated inside a ``with Tape():`` block.

    torch's autograd graph holds the backward rules; the tape keeps the
    forward order so a numerical failure can be traced to the operator that
    produced it.
    """

    def __init__(self):
        self.records: List[TapeRecord] = []
        self._token = None

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.records)

    def record(self, op: str, out: Tensor):
        self.records.append(TapeRecord(len(self.records), op, tuple(out.shape)))

    def ops(self) -> List[str]:
        return [r.op for r in self.records]

    def clear(self):
        self.records.clear()


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


def _emit(op: str, out: Tensor) -> Tensor:
    if not bool(torch.isfinite(out).all()):
        tape = active_tape()
        where = f' (tape position {len(tape)})' if tape is not None else ''
        raise NumericalError(f'{op} produced non-finite values in a tensor of shape {tuple(out.shape)}{where}')
    tape = active_tape()
    if tape is not None:
        tape.record(op, out)
    return out


def _check_rank(x: Tensor, rank: int, what: str):
    if x.dim() != rank:
        raise ShapeError(f'{what}: expected a rank-{rank} tensor, got shape {tuple(x.shape)}')


def _check_axis(x: Tensor, axis: int, what: str) -> int:
    if not -x.dim() <= axis < x.dim():
        raise ShapeError(f'{what}: axis {axis} out of range for a rank-{x.dim()} tensor')
    return axis % x.dim()


@dataclass(frozen=True)
class ConvSpec:
    """Kernel, stride, padding and grouping of a 3D convolution."""
    kernel: Tuple[int, int, int] = (1, 1, 1)
    stride: Tuple[int, int, int] = (1, 1, 1)
    padding: Tuple[int, int, int] = (0, 0, 0)
    groups: int = 1

    def __post_init__(self):
        object.__setattr__(self, 'kernel', tuple(int(k) for k in _triple(self.kernel)))
        object.__setattr__(self, 'stride', tuple(int(s) for s in _triple(self.stride)))
        object.__setattr__(self, 'padding', tuple(int(p) for p in _triple(self.padding)))
        if min(self.kernel) < 1 or min(self.stride) < 1:
            raise ConfigError(f'ConvSpec: kernel {self.kernel} and stride {self.stride} must be positive')
        if min(self.padding) < 0:
            raise ConfigError(f'ConvSpec: padding {self.padding} must be non-negative')
        if self.groups < 1:
            raise ConfigError(f'ConvSpec: groups must be positive, got {self.groups}')

    @classmethod
    def same(cls, kernel, groups=1):
        kernel = _triple(kernel)
        return cls(kernel=kernel, padding=tuple(k // 2 for k in kernel), groups=groups)

    @classmethod
    def window(cls, size, groups=1):
        # r = k: non-overlapping windows
        return cls(kernel=size, stride=size, groups=groups)

    def is_depthwise(self, in_channels: int) -> bool:
        return self.groups == in_channels

    def output_extent(self, extent: Sequence[int]) -> Tuple[int, ...]:
        return tuple((n + 2 * p - k) // s + 1
                     for n, k, s, p in zip(extent, self.kernel, self.stride, self.padding))

    def stride_padding(self, extent: Sequence[int]) -> Tuple[int, ...]:
        """Zeros appended per axis so a strided window tiles the padded extent."""
        extra = []
        for n, k, s, p in zip(extent, self.kernel, self.stride, self.padding):
            span = n + 2 * p
            if s == 1:
                extra.append(0)
            elif span < k:
                extra.append(k - span)
            else:
                extra.append((-(span - k)) % s)
        return tuple(extra)


def _right_pad(x: Tensor, extra: Sequence[int]) -> Tensor:
    if not any(extra):
        return x
    ed, eh, ew = extra
    return F.pad(x, (0, ew, 0, eh, 0, ed))


def conv3d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, spec: ConvSpec = ConvSpec()) -> Tensor:
    _check_rank(x, 5, 'conv3d input')
    _check_rank(w, 5, 'conv3d weight')
    c = x.shape[1]
    if c % spec.groups:
        raise ShapeError(f'conv3d: axis C has {c} channels, not divisible by groups={spec.groups}')
    if w.shape[1] != c // spec.groups:
        raise ShapeError(f'conv3d: weight axis 1 is {w.shape[1]}, expected C/groups = {c // spec.groups}')
    if w.shape[0] % spec.groups:
        raise ShapeError(f'conv3d: {w.shape[0]} output channels not divisible by groups={spec.groups}')
    for axis, k, wk in zip(AXES, spec.kernel, w.shape[2:]):
        if k != wk:
            raise ShapeError(f'conv3d: weight kernel along axis {axis} is {wk}, ConvSpec kernel is {k}')
    if b is not None and tuple(b.shape) != (w.shape[0],):
        raise ShapeError(f'conv3d: bias shape {tuple(b.shape)} does not match {w.shape[0]} output channels')

    x = _right_pad(x, spec.stride_padding(x.shape[2:]))
    for axis, n, out in zip(AXES, x.shape[2:], spec.output_extent(x.shape[2:])):
        if out < 1:
            raise ShapeError(f'conv3d: axis {axis} has output extent {out} '
                             f'(input {n}, kernel {spec.kernel}, padding {spec.padding})')
    out = F.conv3d(x, w, b, stride=spec.stride, padding=spec.padding, groups=spec.groups)
    return _emit('conv3d', out)


def transposed_conv3d(x: Tensor, w: Tensor, spec: ConvSpec, b: Optional[Tensor] = None) -> Tensor:
    _check_rank(x, 5, 'transposed_conv3d input')
    _check_rank(w, 5, 'transposed_conv3d weight')
    if spec.stride != spec.kernel or any(spec.padding):
        raise ShapeError(f'transposed_conv3d: requires stride == kernel and no padding, got {spec}')
    c = x.shape[1]
    if w.shape[0] != c:
        raise ShapeError(f'transposed_conv3d: weight axis 0 is {w.shape[0]}, input axis C is {c}')
    if c % spec.groups:
        raise ShapeError(f'transposed_conv3d: axis C has {c} channels, not divisible by groups={spec.groups}')
    for axis, k, wk in zip(AXES, spec.kernel, w.shape[2:]):
        if k != wk:
            raise ShapeError(f'transposed_conv3d: weight kernel along axis {axis} is {wk}, ConvSpec kernel is {k}')
    if b is not None and tuple(b.shape) != (w.shape[1] * spec.groups,):
        raise ShapeError(f'transposed_conv3d: bias shape {tuple(b.shape)} does not match the output channels')
    out = F.conv_transpose3d(x, w, b, stride=spec.stride, groups=spec.groups)
    return _emit('transposed_conv3d', out)


def instance_norm3d(x: Tensor, eps: float, gain: Tensor, bias: Tensor) -> Tensor:
    _check_rank(x, 5, 'instance_norm3d input')
    if eps <= 0:
        raise ConfigError(f'instance_norm3d: eps must be positive, got {eps}')
    c = x.shape[1]
    if tuple(gain.shape) != (c,) or tuple(bias.shape) != (c,):
        raise ShapeError(f'instance_norm3d: gain/bias must have {c} entries, '
                         f'got {tuple(gain.shape)} and {tuple(bias.shape)}')
    voxels = math.prod(x.shape[2:])
    if voxels < 2:
        raise ShapeError(f'instance_norm3d: variance undefined with {voxels} voxel(s) per channel')
    out = F.instance_norm(x, weight=gain, bias=bias, eps=eps)
    return _emit('instance_norm3d', out)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis, 'softmax')
    return _emit('softmax', torch.softmax(x, dim=axis))


def _resize_axis(x: Tensor, axis: int, size: int) -> Tensor:
    n = x.shape[axis]
    # sample positions sit at half-voxel offsets spread over [0, n - 1]
    src = (torch.arange(size, dtype=x.dtype, device=x.device) + 0.5) * ((n - 1) / size)
    lo = src.floor().long().clamp(max=n - 1)
    hi = (lo + 1).clamp(max=n - 1)
    view = [1] * x.dim()
    view[axis] = size
    frac = (src - lo.to(x.dtype)).view(view)
    return torch.lerp(x.index_select(axis, lo), x.index_select(axis, hi), frac)


def trilinear_resize(x: Tensor, size: Sequence[int]) -> Tensor:
    _check_rank(x, 5, 'trilinear_resize input')
    size = tuple(int(s) for s in size)
    if len(size) != 3 or min(size) < 1:
        raise ShapeError(f'trilinear_resize: target extents must be three positive ints, got {size}')
    if tuple(x.shape[2:]) == size:
        return x
    out = x
    for axis, target in zip((2, 3, 4), size):
        if out.shape[axis] != target:
            out = _resize_axis(out, axis, target)
    return _emit('trilinear_resize', out)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f'matmul: cannot multiply {tuple(a.shape)} by {tuple(b.shape)}')
    return _emit('matmul', torch.matmul(a, b))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f'add: shapes {tuple(a.shape)} and {tuple(b.shape)} differ')
    return _emit('add', a + b)


def scale(x: Tensor, factor: Union[float, Tensor]) -> Tensor:
    if isinstance(factor, Tensor) and factor.numel() != 1:
        raise ShapeError(f'scale: factor must be a scalar, got shape {tuple(factor.shape)}')
    return _emit('scale', x * factor)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError('concat: nothing to concatenate')
    first = tensors[0]
    axis = _check_axis(first, axis, 'concat')
    for t in tensors[1:]:
        if t.dim() != first.dim():
            raise ShapeError(f'concat: rank {t.dim()} differs from rank {first.dim()}')
        for i, (m, n) in enumerate(zip(first.shape, t.shape)):
            if i != axis and m != n:
                raise ShapeError(f'concat: ragged extents {m} vs {n} on axis {i}')
    return _emit('concat', torch.cat(list(tensors), dim=axis))


def split(x: Tensor, axis: int, parts: Union[int, Sequence[int]]) -> Tuple[Tensor, ...]:
    axis = _check_axis(x, axis, 'split')
    n = x.shape[axis]
    if isinstance(parts, int):
        if parts < 1 or n % parts:
            raise ShapeError(f'split: extent {n} on axis {axis} does not divide into {parts} parts')
        sizes = [n // parts] * parts
    else:
        sizes = [int(p) for p in parts]
        if sum(sizes) != n or min(sizes) < 1:
            raise ShapeError(f'split: sizes {sizes} do not partition extent {n} on axis {axis}')
    pieces = torch.split(x, sizes, dim=axis)
    tape = active_tape()
    if tape is not None:
        for piece in pieces:
            tape.record('split', piece)
    return tuple(pieces)


def relu(x: Tensor) -> Tensor:
    return _emit('relu', F.relu(x))


def sigmoid(x: Tensor) -> Tensor:
    return _emit('sigmoid', torch.sigmoid(x))


def mlp(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor, axis: int = -1) -> Tensor:
    """Two linear maps with a GELU between them, applied along ``axis``."""
    axis = _check_axis(x, axis, 'mlp')
    if w1.shape[1] != x.shape[axis] or w2.shape[1] != w1.shape[0]:
        raise ShapeError(f'mlp: weights {tuple(w1.shape)} / {tuple(w2.shape)} do not chain '
                         f'from {x.shape[axis]} features')
    h = torch.movedim(x, axis, -1)
    h = F.linear(F.gelu(F.linear(h, w1, b1)), w2, b2)
    return _emit('mlp', torch.movedim(h, -1, axis))


ParameterSet = Union[Mapping[str, Tensor], Iterable[Tuple[str, Tensor]], Iterable[Tensor]]


def _named(parameters: ParameterSet) -> Dict[str, Tensor]:
    if isinstance(parameters, Mapping):
        return dict(parameters)
    named = {}
    for i, item in enumerate(parameters):
        if isinstance(item, tuple):
            named[item[0]] = item[1]
        else:
            named[str(i)] = item
    return named


def backward(root: Tensor, parameters: ParameterSet) -> Dict[str, Tensor]:
    """Fill ``.grad`` of every parameter with d(root)/d(parameter).

    Parameters the root does not depend on receive zeros. Any gradient already
    stored on the parameters is discarded first; the active tape is consumed.
    """
    if root.numel() != 1:
        raise ShapeError(f'backward: root must be a scalar, got shape {tuple(root.shape)}')
    if not bool(torch.isfinite(root).all()):
        raise NumericalError(f'backward: root value {root.item()} is not finite')
    named = _named(parameters)
    for p in named.values():
        p.grad = None
    if root.requires_grad:
        root.backward()
    grads = {}
    for name, p in named.items():
        if p.grad is None:
            p.grad = torch.zeros_like(p)
        grads[name] = p.grad
    tape = active_tape()
    if tape is not None:
        tape.clear()
    return grads


def first_non_finite(named_tensors: Iterable[Tuple[str, Optional[Tensor]]]) -> Optional[str]:
    for name, t in named_tensors:
        if t is not None and not bool(torch.isfinite(t).all()):
            return name
    return None
