"""Exception hierarchy shared across the package."""


class GrassError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(GrassError):
    """Invalid argument, shape, index, or configuration value."""


class DataError(GrassError):
    """Unreadable, malformed, or mismatched dataset / file contents."""


class CacheInvalidError(DataError):
    """Encoding cache exists but is corrupt or does not match its inputs."""


class NumericError(GrassError):
    """A computation produced or received non-finite values."""
