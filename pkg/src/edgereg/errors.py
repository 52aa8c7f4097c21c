"""Exception types shared across the package.

The CLI maps each family onto an exit code: argument errors -> 2,
data/format errors -> 3, numeric failures -> 4.
"""


class EdgeRegError(Exception):
    """Base class for all package errors."""


class ArgumentError(EdgeRegError, ValueError):
    pass


class ShapeError(EdgeRegError, ValueError):
    pass


class FormatError(EdgeRegError):
    """File does not follow the expected container layout."""


class TruncationError(FormatError):
    pass


class DataError(EdgeRegError, ValueError):
    """Payload decoded fine but holds invalid values (NaN, out-of-range labels...)."""


class CheckpointError(FormatError):
    pass


class NumericError(EdgeRegError, ArithmeticError):
    """Training produced a non-finite loss."""
