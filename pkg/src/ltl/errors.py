"""Exception types raised across the package."""


class LTLError(Exception):
    """Base class for errors raised by this package."""


class NumericDomainError(LTLError, ValueError):
    """A numeric input was NaN/inf or otherwise outside its domain."""


class StructureError(LTLError, ValueError):
    """Shapes, layer kinds or layer chaining are inconsistent."""


class DivergenceError(LTLError, RuntimeError):
    """Training produced a non-finite loss."""


class FormatError(LTLError, ValueError):
    """A file did not match its declared binary/text format."""
