"""Exception types raised across flowweld."""


class FlowWeldError(Exception):
    """Base class for every error raised by this package."""


class DimensionMismatch(FlowWeldError, ValueError):
    pass


class EmptyMask(FlowWeldError, ValueError):
    pass


class NonFiniteValue(FlowWeldError, ArithmeticError):
    pass


class NonFiniteGradient(NonFiniteValue):
    pass


class AllPointsExcluded(FlowWeldError, RuntimeError):
    pass


class WindowTooLarge(FlowWeldError, ValueError):
    pass


class ConfigError(FlowWeldError, ValueError):
    pass


class MissingGlobal(FlowWeldError, ValueError):
    pass


class InvalidRect(FlowWeldError, ValueError):
    pass


class OutOfRaster(FlowWeldError, ValueError):
    pass


class InvalidFraction(FlowWeldError, ValueError):
    pass


class DisjointBand(FlowWeldError, ValueError):
    pass


class FormatError(FlowWeldError, ValueError):
    """A file did not parse as the expected Netpbm / .flo layout."""
