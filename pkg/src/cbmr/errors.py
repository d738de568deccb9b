"""Exception hierarchy shared by all modules."""


class CBMRError(Exception):
    """Base class for toolkit errors."""


class ValidationError(CBMRError, ValueError):
    """Invalid user input (files, configuration, shapes)."""


class NumericalError(CBMRError, ArithmeticError):
    """A numerical routine produced a non-finite or unusable result."""


class SingularInformationError(NumericalError):
    """The Fisher information is singular, so standard errors are unavailable."""
