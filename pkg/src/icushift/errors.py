"""Exception hierarchy shared by all icushift modules."""


class IcushiftError(Exception):
    """Base class for every error raised by this package."""


# --- tensor / autodiff ---------------------------------------------------


class ShapeMismatch(IcushiftError):
    pass


class DomainError(IcushiftError):
    pass


class NotScalar(IcushiftError):
    pass


class InvalidRate(IcushiftError):
    pass


class EmptySequence(IcushiftError):
    pass


# --- training ------------------------------------------------------------


class MissingGradient(IcushiftError):
    pass


class EmptySource(IcushiftError):
    pass


class NotNormalized(IcushiftError):
    pass


# --- continual-learning strategies ---------------------------------------


class NoBuffer(IcushiftError):
    pass


class InvalidPeriod(IcushiftError):
    pass


class LengthMismatch(IcushiftError):
    pass


# --- synthetic cohorts and episode files ----------------------------------


class InvalidProfile(IcushiftError):
    pass


class EmptyCohort(IcushiftError):
    pass


class IoFailure(IcushiftError):
    pass


class MalformedFile(IcushiftError):
    """Raised on unreadable episode/listfile content; message names file and line."""


class SchemaMismatch(IcushiftError):
    pass


class TooShort(IcushiftError):
    pass


# --- metrics ---------------------------------------------------------------


class SingleClass(IcushiftError):
    pass


class NoPositives(IcushiftError):
    pass


class AllColumnsDegenerate(IcushiftError):
    pass


class EmptyInput(IcushiftError):
    pass


# --- harness ---------------------------------------------------------------


class NoResults(IcushiftError):
    pass


class UsageError(IcushiftError):
    pass
