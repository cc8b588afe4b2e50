"""Exception types shared across the package."""


class SvbError(Exception):
    """Base class for all svbfit errors."""


class DimensionMismatch(SvbError):
    pass


class NotPositiveDefinite(SvbError):
    pass


class ParamCountMismatch(SvbError):
    pass


class NonFiniteOutput(SvbError):
    pass


class InvalidBatchSize(SvbError):
    pass


class EmptyTrace(SvbError):
    pass


class NonConvergence(SvbError):
    pass


class ModelEvaluationFailure(SvbError):
    """Raised when model evaluation produced non-finite values during a fit.

    Carries whatever results were computed before the failure in ``results``
    (a list of FitResult with partial traces).
    """

    def __init__(self, message, results=None):
        super().__init__(message)
        self.results = results


class ParseError(SvbError):
    pass


class InvariantViolation(SvbError):
    pass


class TagMismatch(SvbError):
    pass
