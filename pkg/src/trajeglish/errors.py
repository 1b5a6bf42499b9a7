"""Shared exception types and process exit codes."""


class TrajeglishError(Exception):
    """Base class for all library errors."""


class ConfigError(TrajeglishError):
    """Invalid configuration or command-line arguments."""


class DataError(TrajeglishError):
    """Malformed, missing, or inconsistent data artifacts."""


class NumericError(TrajeglishError):
    """Numerical failure (divergence, NaN loss, etc.)."""


class InsufficientDiversityError(DataError):
    """Disk sampling exhausted the transition pool before reaching the requested vocabulary size."""

    def __init__(self, found: int, requested: int):
        self.found = found
        self.requested = requested
        super().__init__(
            f"insufficient diversity: pool exhausted after {found} of {requested} templates"
        )


# CLI exit codes. 0 is success; distinct nonzero codes per failure family.
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
