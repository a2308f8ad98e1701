"""Exception taxonomy.

Every error raised on purpose by the package derives from :class:`OULabError`.
Numerical failures additionally derive from :class:`NumericalError`, which the
CLI maps to its own exit code.
"""


class OULabError(Exception):
    """Base class for all package errors."""


class NumericalError(OULabError):
    """A computation could not be carried out to the promised accuracy."""


class ModelInvalid(OULabError, ValueError):
    """The pair (Q, B) does not define a valid OU model."""


class NotSymmetric(ModelInvalid):
    pass


class NotPositiveDefinite(ModelInvalid):
    pass


class DriftNotStable(ModelInvalid):
    pass


class LyapunovSingular(ModelInvalid, NumericalError):
    pass


class MatrixExpOverflow(NumericalError, OverflowError):
    pass


class NegativeTimeUnsupportedRoute(OULabError, ValueError):
    pass


class TimeNonpositive(OULabError, ValueError):
    pass


class DimensionTooLargeForQuadrature(OULabError, ValueError):
    pass


class QuadratureNotConverged(NumericalError):
    pass


class OriginExcluded(OULabError, ValueError):
    pass


class BracketNotFound(NumericalError):
    pass


class BetaTooSmall(OULabError, ValueError):
    pass


class SampleBudgetTooSmall(NumericalError):
    pass


class WidthNotConverged(NumericalError):
    pass


class GridTooCoarse(NumericalError):
    pass


class ConfigParse(OULabError, ValueError):
    pass
