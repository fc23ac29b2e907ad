"""Block compressive sensing codec for grayscale video with a staged,
motion-compensated feed-forward decoder."""

from .errors import (
    BoundsError,
    ConfigError,
    CsmcError,
    DegenerateSignalError,
    DimensionError,
    FormatError,
    SingularityError,
)

__version__ = "0.1.0"
