"""Exception hierarchy shared by every antkit module."""


class AntError(Exception):
    """Base class for all toolkit errors."""


class DataError(AntError, ValueError):
    """Malformed, missing or unusable input data."""


class ComputeError(AntError, ArithmeticError):
    """Numerical failure: non-finite loss, divergence."""


class IncompatibleError(AntError, ValueError):
    """A model, encoding and attack that cannot be combined."""
