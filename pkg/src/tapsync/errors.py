"""Exception types shared across the package."""


class TapSyncError(Exception):
    """Base class for all package errors."""


class DomainError(TapSyncError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class ConvergenceError(TapSyncError, RuntimeError):
    """An iterative method hit its iteration cap.

    ``residual`` holds the last residual reached, ``details`` any extra
    diagnostics the caller may want to log.
    """

    def __init__(self, message, residual=float("nan"), details=None):
        super().__init__(message)
        self.residual = residual
        self.details = details or {}


class ConfigError(TapSyncError, ValueError):
    """Malformed experiment or CLI configuration."""
