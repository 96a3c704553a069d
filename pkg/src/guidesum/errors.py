"""Exception types raised across the package."""


class GuidesumError(Exception):
    """Base class for all package errors."""


class InputError(GuidesumError, ValueError):
    """Invalid argument or input data."""


class DimensionError(InputError):
    """Tensor shapes do not agree."""


class GraphError(GuidesumError, RuntimeError):
    """Backward requested on a tensor without a live graph."""


class NumericError(GuidesumError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class UndefinedLossError(NumericError):
    """Every target position was ignored, so the mean loss is undefined."""


class LengthError(InputError):
    """Sequence longer than the configured maximum."""


class GuardError(InputError):
    """An attention row has no attendable key."""


class ParseError(InputError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class IntegrityError(InputError):
    """Duplicate or mismatched record ids."""


class DegenerateDataError(InputError):
    """Data has zero spread where the computation needs some."""


class ConfigError(InputError):
    """Inconsistent configuration values."""


class DivergenceError(NumericError):
    """Training loss became non-finite; ``checkpoint`` holds the last good state."""

    def __init__(self, message: str, checkpoint=None, log=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.log = log


class CheckpointError(GuidesumError, IOError):
    """Base class for checkpoint load failures."""


class VersionError(CheckpointError):
    pass


class TruncationError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    def __init__(self, name: str, expected, found):
        self.name = name
        super().__init__(f"tensor {name!r}: expected shape {tuple(expected)}, found {tuple(found)}")
