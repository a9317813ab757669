"""Little-endian parameter archive (``.hwau``).

Layout::

    b"HWAU" | version u32 | count u32
    count x ( name_len u16 | name utf-8 | dtype u8 | ndim u8 | shape ndim x u32 | offset u64 )
    payload: raw little-endian arrays, offsets relative to the payload start
"""
import logging
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping, Union

import numpy as np
import torch
import torch.nn as nn

from .errors import CheckpointError, TruncatedFileError

logger = logging.getLogger(__name__)

MAGIC = b'HWAU'
VERSION = 1

_DTYPES = {0: np.dtype('<f4'), 1: np.dtype('<f8'), 2: np.dtype('<i8')}
_CODES = {torch.float32: 0, torch.float64: 1, torch.int64: 2}

_HEAD = struct.Struct('<4sII')


def _state(source: Union[nn.Module, Mapping[str, torch.Tensor]]):
    if isinstance(source, nn.Module):
        return source.state_dict()
    return source


def encode_checkpoint(source) -> bytes:
    state = _state(source)
    entries, payloads = [], []
    offset = 0
    for name, tensor in state.items():
        tensor = tensor.detach().cpu()
        if tensor.dtype not in _CODES:
            raise CheckpointError(f'{name}: unsupported dtype {tensor.dtype}')
        code = _CODES[tensor.dtype]
        raw = np.ascontiguousarray(tensor.numpy(), dtype=_DTYPES[code]).tobytes()
        key = name.encode('utf-8')
        entry = struct.pack('<H', len(key)) + key + struct.pack('<BB', code, tensor.dim())
        entry += struct.pack(f'<{tensor.dim()}I', *tensor.shape) + struct.pack('<Q', offset)
        entries.append(entry)
        payloads.append(raw)
        offset += len(raw)
    return _HEAD.pack(MAGIC, VERSION, len(entries)) + b''.join(entries) + b''.join(payloads)


def decode_checkpoint(data: bytes) -> 'OrderedDict[str, torch.Tensor]':
    if data[:4] != MAGIC:
        raise CheckpointError(f'bad checkpoint magic {data[:4]!r}')
    if len(data) < _HEAD.size:
        raise TruncatedFileError('checkpoint header is truncated')
    _, version, count = _HEAD.unpack_from(data)
    if version != VERSION:
        raise CheckpointError(f'unsupported checkpoint version {version}')

    pos = _HEAD.size
    manifest = []
    try:
        for _ in range(count):
            (n,) = struct.unpack_from('<H', data, pos)
            pos += 2
            try:
                name = data[pos:pos + n].decode('utf-8')
            except UnicodeDecodeError as exc:
                raise CheckpointError(f'tensor name at byte {pos} is not UTF-8 ({exc.reason})') from exc
            pos += n
            code, ndim = struct.unpack_from('<BB', data, pos)
            pos += 2
            shape = struct.unpack_from(f'<{ndim}I', data, pos)
            pos += 4 * ndim
            (offset,) = struct.unpack_from('<Q', data, pos)
            pos += 8
            if code not in _DTYPES:
                raise CheckpointError(f'{name}: unknown dtype code {code}')
            manifest.append((name, _DTYPES[code], shape, offset))
    except struct.error as exc:
        raise TruncatedFileError(f'checkpoint manifest is truncated: {exc}') from exc

    state = OrderedDict()
    for name, dtype, shape, offset in manifest:
        count = int(np.prod(shape, dtype=np.int64))
        start = pos + offset
        if start + count * dtype.itemsize > len(data):
            raise TruncatedFileError(f'payload of {name} is truncated')
        array = np.frombuffer(data, dtype=dtype, count=count, offset=start)
        state[name] = torch.from_numpy(array.astype(dtype.newbyteorder('='))).reshape(shape)
    return state


def save_checkpoint(source, path) -> Path:
    path = Path(path)
    path.write_bytes(encode_checkpoint(source))
    logger.info('saved checkpoint %s', path)
    return path


def load_checkpoint(path, model: nn.Module = None):
    """Read a ``.hwau`` file; load it into ``model`` when given, otherwise return the state."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f'checkpoint {path} does not exist')
    state = decode_checkpoint(path.read_bytes())
    if model is None:
        return state
    missing = set(model.state_dict()) ^ set(state)
    if missing:
        raise CheckpointError(f'checkpoint {path} does not match the model: {sorted(missing)[:4]}')
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f'checkpoint {path} does not match the model: {exc}') from exc
    return model
