"""Exception hierarchy shared by every engine."""

from __future__ import annotations


class AggTopkError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(AggTopkError, ValueError):
    """A time or value lies outside the domain an operation accepts."""


class ParameterError(AggTopkError, ValueError):
    """A tuning parameter (epsilon, k, k_max, ...) is out of range."""


class BuildError(AggTopkError, ValueError):
    """Input handed to a bulk builder violates its ordering or shape contract."""


class OutOfOrderError(AggTopkError, ValueError):
    """An append would land before the current maximum key or time."""


class DiscontinuityError(AggTopkError, ValueError):
    """An appended segment does not start at the object's last vertex."""


class CapacityError(AggTopkError, ValueError):
    """A structure would exceed the space budget it is allowed to use."""


class FormatError(AggTopkError, ValueError):
    """A file on disk does not match the expected layout."""
