"""Exception hierarchy shared across the package."""


class NormLabError(Exception):
    """Base class for all errors raised by normlab."""


class ShapeError(NormLabError, ValueError):
    """Operands have incompatible shapes."""


class ConfigurationError(NormLabError, ValueError):
    """A layer, geometry, or experiment configuration is invalid."""


class InputError(NormLabError, ValueError):
    """Input data is out of range or otherwise unusable."""


class UsageError(NormLabError, RuntimeError):
    """An API was called in an invalid order or with an invalid root."""


class FormatError(NormLabError, ValueError):
    """A dataset or checkpoint file does not match its binary layout."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DivergedError(NormLabError, FloatingPointError):
    """Training produced a non-finite loss or gradient."""
