"""Shared exception types."""


class ValidationError(ValueError):
    """Bad inputs: malformed files, schema mismatches, invalid configs."""


class NumericsError(ArithmeticError):
    """A numeric op produced NaN/Inf or was called with non-finite data."""
