# ivgl / Copyright Consortium Érudit <tech@erudit.org> / MIT License


class IVGLError(Exception):
    """Base class of all the errors raised by ivgl."""


class InvalidInputError(IVGLError, ValueError):
    """Non-finite data, inconsistent shapes, or invalid configuration values."""


class InvalidGraphError(InvalidInputError):
    """A graph violating one of its invariants."""


class DiagnosticUnavailableError(IVGLError, ArithmeticError):
    """A diagnostic that cannot be computed on the given data."""
