"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: plain OSError means an I/O failure,
ConfigError a bad configuration or flag, and ValidationError (plus its
subclasses) a data or contract violation.
"""


class NulogError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(NulogError):
    """Malformed configuration: bad config file, invalid filter pattern, bad flag."""


class ValidationError(NulogError):
    """Input data or arguments violate a documented precondition."""


class SchemaError(ValidationError):
    """A structured input file lacks required columns or fields."""


class ShapeError(ValidationError):
    """Matrix shapes are incompatible for the requested kernel."""


class ArchiveError(ValidationError):
    """A model archive is corrupt, truncated, or has an unsupported version."""


class StaleGradientError(NulogError):
    """An optimizer step was requested before gradients were populated."""
