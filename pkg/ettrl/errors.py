"""Exception types shared across the lab.

Every class also derives from the closest builtin so callers that only know
about ``ValueError``/``OSError`` keep working.
"""
from __future__ import annotations


class EttrlError(Exception):
    """Base class for every error raised on purpose by this package."""


class InvalidArgument(EttrlError, ValueError):
    pass


class NumericFault(EttrlError, ArithmeticError):
    pass


class SizeExceeded(EttrlError, ValueError):
    pass


class InvalidConfig(EttrlError, ValueError):
    pass


class LoadFailure(EttrlError, OSError):
    pass


class WriteFailure(EttrlError, OSError):
    pass
