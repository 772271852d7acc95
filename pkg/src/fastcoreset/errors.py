"""Exception types raised across the package."""


class FastError(Exception):
    """Base class for every error raised by fastcoreset."""


class InvalidParameterError(FastError, ValueError):
    """An argument violates a documented precondition."""


class FormatError(FastError):
    """An input file does not match its declared on-disk format."""


class NumericalError(FastError, ArithmeticError):
    """A computation produced a non-finite value or failed to factorize."""
