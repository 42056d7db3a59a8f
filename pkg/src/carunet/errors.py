"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, DataError and
CheckpointError -> 2, NumericError -> 3.
"""


class CarUnetError(Exception):
    """Base class for all package errors."""


class ShapeError(CarUnetError, ValueError):
    """Tensor or layer received operands with incompatible shapes."""


class TapeError(CarUnetError, RuntimeError):
    """Illegal use of the autodiff tape (wrong tape, double backward)."""


class ConfigError(CarUnetError, ValueError):
    """Invalid configuration value, unknown key, or bad preset."""


class DataError(CarUnetError, ValueError):
    """Dataset layout, image decoding, or label validity problem."""


class CheckpointError(CarUnetError, ValueError):
    """Weight file is malformed or does not match the network."""


class NumericError(CarUnetError, RuntimeError):
    """Non-finite value produced where a finite one is required."""
