"""Exception types shared by the package.

The CLI maps each family onto a process exit code (see ``EXIT_CODES``).
"""


class HwaError(Exception):
    kind = 'error'


class ConfigError(HwaError, ValueError):
    kind = 'config'


class ShapeError(HwaError, ValueError):
    kind = 'shape'


class DataError(HwaError):
    kind = 'data'


class VolumeFormatError(DataError):
    kind = 'format'


class TruncatedFileError(DataError):
    kind = 'truncated'


class SpacingError(DataError, ValueError):
    kind = 'spacing'


class CheckpointError(DataError):
    kind = 'checkpoint'


class NumericalError(HwaError, ArithmeticError):
    kind = 'numerical'


EXIT_CODES = {
    ConfigError: 2,
    ShapeError: 2,
    DataError: 3,
    NumericalError: 4,
}


def exit_code(exc):
    for cls, code in EXIT_CODES.items():
        if isinstance(exc, cls):
            return code
    return 1
