"""Exception hierarchy.

Every error raised on purpose by the package derives from
:class:`AdaptiveLimitsError`, so callers can catch one type at the edges
(the CLI maps these to exit code 1).
"""


class AdaptiveLimitsError(Exception):
    pass


class ValidationError(AdaptiveLimitsError, ValueError):
    pass


# data model
class SubstitutionUndefined(ValidationError):
    pass


class NonPositiveValue(ValidationError):
    pass


class DivisionByNonPositive(ValidationError):
    pass


class MalformedRow(ValidationError):
    pass


class UnknownMarkerColumn(ValidationError):
    pass


class DuplicateTimestamp(ValidationError):
    pass


# numerics
class NotPositiveDefinite(AdaptiveLimitsError, ArithmeticError):
    """Cholesky failed.

    ``minor`` is the 1-based order of the first leading minor that is not
    positive; ``where`` names the matrix (e.g. the Gibbs conditional).
    """

    def __init__(self, minor: int, where: str = ""):
        self.minor = minor
        self.where = where
        msg = f"matrix is not positive definite (leading minor {minor})"
        if where:
            msg = f"{where}: {msg}"
        super().__init__(msg)


class InvalidParameter(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class DegreesOfFreedomTooSmall(InvalidParameter):
    pass


class TooFewSamples(ValidationError):
    pass


class TooFewObservations(ValidationError):
    pass


# models / pipeline
class EmptyAthlete(ValidationError):
    pass


class UnknownAthlete(AdaptiveLimitsError, KeyError):
    pass


class MissingThreshold(AdaptiveLimitsError, KeyError):
    pass


class SingleClassInput(ValidationError):
    pass


class MissingLabel(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class InvalidSpec(ValidationError):
    pass


class ConfigError(ValidationError):
    """Bad run configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")
