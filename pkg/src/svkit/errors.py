"""Exception hierarchy.

Everything raised on bad input derives from :class:`SvkitError`, which the
CLI maps to exit code 2.
"""


class SvkitError(Exception):
    """Base class for data and validation errors."""


class ConfigError(SvkitError, ValueError):
    pass


class DataError(SvkitError, ValueError):
    pass


class WavDecodeError(DataError):
    pass


class ChunkTooShortError(DataError):
    pass


class FormatError(DataError):
    """Malformed binary container (checkpoint or embedding archive)."""
