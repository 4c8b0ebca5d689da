"""Exception hierarchy shared by every module."""


class EmbregError(Exception):
    """Base class for all library errors."""


# tensor core
class ShapeMismatch(EmbregError, ValueError):
    pass


class NonFinite(EmbregError, FloatingPointError):
    pass


class NotScalar(EmbregError, ValueError):
    pass


# data
class ParseError(EmbregError, ValueError):
    pass


class NonMonotonicTimestamps(EmbregError, ValueError):
    pass


class UnknownSeriesInAdjacency(EmbregError, KeyError):
    pass


class BadProfile(EmbregError, ValueError):
    pass


class TooShort(EmbregError, ValueError):
    pass


# models
class MissingAdjacency(EmbregError, ValueError):
    pass


class HeadsDivisibility(EmbregError, ValueError):
    pass


# regularizers
class NegativeStrength(EmbregError, ValueError):
    pass


class BadMode(EmbregError, ValueError):
    pass


class ConflictingSpecs(EmbregError, ValueError):
    pass


# training / metrics
class EmptyMask(EmbregError, ValueError):
    pass


class ZeroDenominator(EmbregError, ZeroDivisionError):
    pass


# experiments
class IncompatibleChannels(EmbregError, ValueError):
    pass


class TooFewSeries(EmbregError, ValueError):
    pass


# config
class UnknownKey(EmbregError, KeyError):
    """``UnknownKey(key, line=None, allowed=())``; the message names the offending key."""

    def __init__(self, key, line=None, allowed=()):
        super().__init__(key, line, tuple(allowed))
        self.key, self.line, self.allowed = key, line, tuple(allowed)

    def __str__(self):
        where = f"line {self.line}: " if self.line else ""
        hint = f" (allowed: {', '.join(self.allowed)})" if self.allowed else ""
        return f"{where}unknown key {self.key!r}{hint}"


class ConstraintViolation(EmbregError, ValueError):
    pass
