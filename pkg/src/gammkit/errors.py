"""Exception types shared across the package.

Every error raised on a user-facing path derives from GammkitError so the
CLI can catch one type, print the message, and exit nonzero.
"""


class GammkitError(Exception):
    """Base class for all package errors."""


class SchemaError(GammkitError):
    """A declared column is missing or has the wrong role."""


class ParseError(GammkitError):
    """A cell or a model-spec line could not be parsed."""


class DomainError(GammkitError):
    """An argument is outside its valid domain (rho, lambda, degree, ...)."""


class RankError(GammkitError):
    """A design or basis is rank deficient where full rank is required."""


class ShapeError(GammkitError):
    """Arrays or tables with incompatible shapes or row counts."""


class NestingError(GammkitError):
    """Model comparison where the claimed nesting does not hold."""


class NumericError(GammkitError):
    """A non-finite intermediate was produced during fitting."""
