"""Exception types raised across the package."""


class CsmcError(Exception):
    """Base class for all library errors."""


class DimensionError(CsmcError, ValueError):
    pass


class ConfigError(CsmcError, ValueError):
    pass


class BoundsError(CsmcError, IndexError):
    pass


class SingularityError(CsmcError, ArithmeticError):
    pass


class DegenerateSignalError(CsmcError, ValueError):
    pass


class FormatError(CsmcError, ValueError):
    """Malformed or truncated binary file."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
