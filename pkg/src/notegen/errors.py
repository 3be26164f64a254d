"""Exception types raised across the package."""


class NotegenError(Exception):
    """Base class for all package errors."""


class DataError(NotegenError, ValueError):
    """Input data violates a contract (bad file, bad ids, bad shapes)."""


# midi
class BadHeader(DataError):
    pass


class TruncatedFile(DataError):
    pass


class BadVlq(DataError):
    pass


class UnknownStatus(DataError):
    pass


class InvalidEvent(DataError):
    pass


# tokens
class EmptyCorpus(DataError):
    pass


class TooShort(DataError):
    pass


class UnknownToken(DataError):
    pass


class BadToken(DataError):
    pass


# numerics
class ShapeMismatch(DataError):
    pass


class EmptyInput(DataError):
    pass


class BadRate(DataError):
    pass


class StaleCache(NotegenError):
    pass


class CorruptCheckpoint(DataError):
    pass


# training / generation
class BadTarget(DataError):
    pass


class EmptySet(DataError):
    pass


class UnknownVariant(DataError):
    pass


class BadConfig(DataError):
    pass


class BadSeed(DataError):
    pass


class Divergence(NotegenError):
    """Training produced a non-finite loss."""
