"""HWA-UNETR: multi-modal 3D segmentation with window aggregation, group convolution and directional scans."""
from .errors import ConfigError, DataError, HwaError, NumericalError, ShapeError
from .model import HwaUnetr, ModelConfig, sliding_window_infer

__version__ = '0.1.0'
