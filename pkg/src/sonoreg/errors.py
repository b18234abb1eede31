"""Exception hierarchy shared by every sonoreg module.

The CLI maps these onto exit codes: validation-type errors exit 1, I/O errors
(``OSError``) exit 2, numerical failures exit 3.
"""


class SonoregError(Exception):
    """Base class for all package errors."""


class ValidationError(SonoregError, ValueError):
    """Input violates a documented invariant."""


class ShapeError(ValidationError):
    """Array or raster dimensions are incompatible."""


class FormatError(ValidationError):
    """A file exists but its contents are not in a supported format."""


class DomainError(ValidationError):
    """A scalar argument lies outside its allowed range."""


class NumericalError(SonoregError, ArithmeticError):
    """An optimisation produced a non-finite value."""
