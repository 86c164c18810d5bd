"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: usage and configuration
problems exit 2, bad input data exits 3, numerical failures exit 4.
"""


class SdfGanError(Exception):
    """Base class for all package-specific errors."""


class UsageError(SdfGanError):
    """An API or CLI was called in a way its contract forbids."""

    exit_code = 2


class DimensionError(UsageError):
    """Tensor or grid shapes are incompatible; message names the axes."""


class ConfigError(UsageError):
    """A configuration value is invalid or a named key is unknown."""


class DomainError(SdfGanError):
    """A query point or payload lies outside the supported domain."""

    exit_code = 3


class DataError(SdfGanError):
    """A file or dataset is malformed, truncated, or empty."""

    exit_code = 3


class NumericError(SdfGanError):
    """A computation produced non-finite or singular results."""

    exit_code = 4
