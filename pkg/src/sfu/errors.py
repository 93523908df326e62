"""Exception types shared across the package."""


class SFUError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(SFUError, ValueError):
    """Invalid configuration value or impossible setup."""

    def __init__(self, message, key=None):
        self.key = key
        self.detail = message
        if key is not None:
            message = f"{key}: {message}"
        super().__init__(message)


class InputError(SFUError, ValueError):
    """Shape or alignment mismatch in arguments."""


class ProtocolError(SFUError, RuntimeError):
    """Clients and server disagree on the model layout."""


class MetricError(SFUError, ValueError):
    """A metric was requested on a population where it is undefined."""
