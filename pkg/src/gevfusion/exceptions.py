"""Exception hierarchy shared by all modules."""


class GevFusionError(Exception):
    """Base class for package errors."""


class DataError(GevFusionError, ValueError):
    """Input data or artifact is malformed or inconsistent."""


class ConvergenceError(GevFusionError, RuntimeError):
    """A numerical fit or factorization failed."""
