"""Exception classes shared across the package."""


class GsoccError(Exception):
    """Base class for all domain errors raised by this package."""


class InvalidParameterError(GsoccError):
    """Non-finite or otherwise malformed parameter values."""


class NumericalDegeneracyError(GsoccError):
    """A covariance or linear system is singular beyond recovery."""


class ShapeMismatchError(GsoccError):
    """Array shapes are inconsistent with each other or with a grid spec."""


class ResourceLimitError(GsoccError):
    """A requested computation exceeds a configured size cap."""


class DegenerateTargetError(GsoccError):
    """A supervision target lacks the structure a loss requires."""


class DivergenceError(GsoccError):
    """Optimization produced non-finite loss values."""


class FormatError(GsoccError):
    """A binary or text file does not match its declared format."""
