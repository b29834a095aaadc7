"""Exception taxonomy shared by every module.

The CLI maps these onto exit codes: ConfigError and its subclasses exit
with 2, DataError with 3, NumericError with 4.
"""


class ProtoDistillError(Exception):
    """Base class for all package errors."""


class ConfigError(ProtoDistillError):
    """Invalid or incompatible configuration."""


class DimensionError(ConfigError):
    """Tensor shapes do not line up for the requested operation."""


class DomainError(ConfigError):
    """Argument outside the mathematical domain of a function."""


class UsageError(ConfigError):
    """API called in an unsupported way (e.g. backward on a non-scalar)."""


class DataError(ProtoDistillError):
    """Bad dataset contents, invalid labels, or missing/unreadable files."""


class CorruptionError(DataError):
    """Stored artifact failed checksum or structural validation."""


class NumericError(ProtoDistillError):
    """A computation produced NaN or Inf."""
