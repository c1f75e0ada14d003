"""Exception types shared across the package.

The CLI maps :class:`ValidationError` to exit code 1 and every other
:class:`LingfuseError` to exit code 2.
"""


class LingfuseError(Exception):
    """Base class for all package errors."""


class ValidationError(LingfuseError, ValueError):
    """Bad input: wrong shape, malformed file, violated precondition."""


class DimensionError(ValidationError):
    def __init__(self, dimension, expected, got, where=""):
        self.dimension = dimension
        self.expected = expected
        self.got = got
        loc = f" in {where}" if where else ""
        super().__init__(f"dimension mismatch{loc}: {dimension} expected {expected}, got {got}")


class NumericError(LingfuseError, ArithmeticError):
    """A computation produced or received non-finite values."""
