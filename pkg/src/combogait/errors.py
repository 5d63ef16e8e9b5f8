"""Exception types shared across the package.

Each subclass carries the CLI exit code it maps to.
"""
from .numerics.tensor import ContractError, DimensionError


class ComboGaitError(Exception):
    exit_code = 1


class ValidationError(ComboGaitError, ValueError):
    """Input values violate a documented contract (e.g. non-binary masks)."""


class ConfigError(ComboGaitError, ValueError):
    """Inconsistent or unknown configuration."""


class DataError(ComboGaitError, ValueError):
    """Dataset-level problems: empty data, misaligned streams."""


class LabelError(ComboGaitError, ValueError):
    """A class label is outside its valid range."""


class ProtocolError(ComboGaitError, ValueError):
    """Probe/gallery protocol violation."""


class NumericError(ComboGaitError, ArithmeticError):
    """Training produced a non-finite loss."""


class FormatError(ComboGaitError, ValueError):
    """Malformed binary or CSV file; ``offset`` is the byte where parsing failed."""

    exit_code = 2

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


__all__ = [
    "ComboGaitError",
    "ConfigError",
    "ContractError",
    "DataError",
    "DimensionError",
    "FormatError",
    "LabelError",
    "NumericError",
    "ProtocolError",
    "ValidationError",
]
