"""Exception hierarchy shared by all modules."""


class PVMCError(Exception):
    """Base class for errors raised by this package."""


class ConfigurationError(PVMCError, ValueError):
    """Invalid parameters or configuration (CLI exit code 2)."""


class ModelError(PVMCError, ValueError):
    """Inconsistent system model, e.g. mismatched dimensions or zero weights."""


class GraphError(PVMCError, ValueError):
    """Shape mismatch while building an autodiff graph."""


class UsageError(PVMCError, ValueError):
    """API misuse, e.g. calling backward on a non-scalar tensor."""


class DivergenceError(PVMCError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class VerificationError(PVMCError, AssertionError):
    """A numerical verification failed (CLI exit code 3)."""
