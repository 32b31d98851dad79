"""Shared exception types. The CLI maps these onto exit codes."""


class ShapeError(ValueError):
    """Tensor or array shapes incompatible with the requested operation."""


class ContractError(ValueError):
    """An API precondition was violated by the caller."""


class DataError(Exception):
    """Missing, malformed, or unreadable input data."""


class NumericError(ArithmeticError):
    """Non-finite values appeared where finite ones are required."""
