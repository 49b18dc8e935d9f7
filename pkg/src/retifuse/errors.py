"""Exception hierarchy shared by every module."""


class FusionError(Exception):
    """Base class for all errors raised by retifuse."""


class NotFound(FusionError, FileNotFoundError):
    pass


class DecodeError(FusionError):
    pass


class UnsupportedFormat(FusionError):
    pass


class InvalidArgument(FusionError, ValueError):
    pass


class ConfigError(InvalidArgument):
    pass


class LayoutError(FusionError):
    pass


class EmptyDataset(FusionError):
    pass


class IoError(FusionError, OSError):
    pass


class ShapeError(FusionError, ValueError):
    pass


class IncompatibleCheckpoint(FusionError):
    pass


class NumericError(FusionError, ArithmeticError):
    pass


class WeightsUnavailable(FusionError):
    pass
