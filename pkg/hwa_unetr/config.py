"""Run configuration: TOML file + ``key=value`` overrides -> validated dataclasses."""
import dataclasses
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import toml

from .dataset import PhantomSpec
from .engine import TrainConfig
from .errors import ConfigError, HwaError
from .model import ModelConfig
from .utils import config_digest

logger = logging.getLogger(__name__)

THREADS_ENV = 'HWAU_NUM_THREADS'
LOG_LEVELS = ('DEBUG', 'INFO', 'WARNING', 'ERROR')


@dataclass
class DataConfig:
    manifest: str = ''
    phantom_count: int = 10
    phantom_seed: int = 0
    split_seed: int = 0

    def __post_init__(self):
        if self.phantom_count < 1:
            raise ConfigError(f'data.phantom_count must be positive, got {self.phantom_count}')


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str = 'runs'
    device_threads: int = 0
    log_level: str = 'INFO'

    def __post_init__(self):
        if isinstance(self.device_threads, bool) or not isinstance(self.device_threads, int):
            raise ConfigError(f'device_threads must be an integer, got {self.device_threads!r}')
        if self.device_threads < 0:
            raise ConfigError('device_threads must be non-negative (0 defers to the environment)')
        if not isinstance(self.output_dir, str):
            raise ConfigError(f'output_dir must be a string, got {self.output_dir!r}')
        if not isinstance(self.log_level, str):
            raise ConfigError(f'log_level must be one of {LOG_LEVELS}, got {self.log_level!r}')
        self.log_level = self.log_level.upper()
        if self.log_level not in LOG_LEVELS:
            raise ConfigError(f'log_level must be one of {LOG_LEVELS}, got {self.log_level!r}')


SECTIONS = {'model': ModelConfig, 'train': TrainConfig, 'phantom': PhantomSpec, 'data': DataConfig}
TOP_LEVEL = ('output_dir', 'device_threads', 'log_level')


def _build(cls, values, where):
    if not isinstance(values, dict):
        raise ConfigError(f'[{where}] must be a table')
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f'unknown key {where}.{unknown[0]}')
    try:
        return cls(**values)
    except HwaError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f'[{where}]: {exc}') from exc


def from_dict(raw: dict) -> RunConfig:
    unknown = sorted(set(raw) - set(SECTIONS) - set(TOP_LEVEL))
    if unknown:
        raise ConfigError(f'unknown key {unknown[0]}')
    sections = {name: _build(cls, raw.get(name, {}), name) for name, cls in SECTIONS.items()}
    try:
        return RunConfig(**sections, **{k: raw[k] for k in TOP_LEVEL if k in raw})
    except HwaError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f'top level: {exc}') from exc


def _parse_value(text: str):
    try:
        return toml.loads(f'value = {text}')['value']
    except toml.TomlDecodeError:
        return text


def apply_overrides(raw: dict, overrides: Iterable[str]) -> dict:
    """Set dotted keys (``train.lr0=0.01``); values are read as TOML literals, else as strings."""
    for item in overrides or ():
        key, sep, text = item.partition('=')
        if not sep or not key.strip():
            raise ConfigError(f'override {item!r} is not of the form key=value')
        *path, leaf = key.strip().split('.')
        node = raw
        for part in path:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f'override {item!r}: {part} is not a table')
        node[leaf] = _parse_value(text.strip())
    return raw


def load_config(path: Optional[str] = None, overrides: Iterable[str] = ()) -> RunConfig:
    raw = {}
    if path:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f'config file {path} does not exist')
        try:
            raw = toml.load(path)
        except toml.TomlDecodeError as exc:
            raise ConfigError(f'{path}: {exc}') from exc
    return from_dict(apply_overrides(raw, overrides))


def to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def dump_config(cfg: RunConfig) -> str:
    return toml.dumps(to_dict(cfg))


def digest(cfg: RunConfig) -> str:
    return config_digest(dump_config(cfg))


def save_config(cfg: RunConfig, run_dir) -> Path:
    path = Path(run_dir) / 'run_config.toml'
    path.write_text(dump_config(cfg), encoding='utf-8')
    return path


def resolve_threads(flag: Optional[int], cfg: RunConfig) -> int:
    """Thread count: flag, then config, then $HWAU_NUM_THREADS, then 1."""
    if flag:
        return flag
    if cfg.device_threads:
        return cfg.device_threads
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            value = int(env)
        except ValueError as exc:
            raise ConfigError(f'{THREADS_ENV}={env!r} is not an integer') from exc
        if value < 1:
            raise ConfigError(f'{THREADS_ENV} must be positive, got {value}')
        return value
    return 1
