"""Exception hierarchy shared across the engine and the CLI."""


class SKDError(Exception):
    """Base class for all engine errors."""


class DimensionError(SKDError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ContractError(SKDError, ValueError):
    """A documented precondition was violated (labels, scalars, freezing...)."""


class NumericError(SKDError, ArithmeticError):
    """Non-finite values or degenerate numerics (zero-norm rows, diverged loss)."""


class ConfigError(SKDError, ValueError):
    """Invalid configuration values."""


class DataError(SKDError):
    """Dataset is unusable for the requested operation."""


class FormatError(DataError):
    """A binary file is malformed.

    ``offset`` is the byte position at which parsing failed.
    """

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
