"""Exception types shared across the engine."""


class CloudPyrError(Exception):
    """Base class for engine errors."""

    category = "error"


class ShapeError(CloudPyrError, ValueError):
    """Tensor extents do not satisfy an operation's contract."""

    category = "shape-error"


class NumericError(CloudPyrError, ArithmeticError):
    """A kernel produced or received non-finite values."""

    category = "numeric-error"


class DataError(CloudPyrError, ValueError):
    """Image/mask content violates the dataset contract."""

    category = "data-error"


class ConfigError(CloudPyrError, ValueError):
    """Invalid run configuration."""

    category = "config-error"


class CheckpointError(CloudPyrError):
    """Base for checkpoint container failures."""

    category = "checkpoint-error"


class BadMagicError(CheckpointError):
    """File does not start with the DPNW magic bytes."""


class VersionError(CheckpointError):
    """Container version is not supported by this reader."""


class ChecksumError(CheckpointError):
    """Entry payload does not match its recorded CRC32."""


class TruncatedError(CheckpointError):
    """File ended before the declared entries were read."""
