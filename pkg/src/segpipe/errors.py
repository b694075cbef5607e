"""Exception hierarchy shared by every pipeline stage."""
from __future__ import annotations


class SegPipeError(Exception):
    """Base class for all pipeline errors."""


class IoError(SegPipeError, OSError):
    pass


class ParseError(SegPipeError, ValueError):
    pass


class UnsupportedFormat(SegPipeError, ValueError):
    pass


class RangeError(SegPipeError, ValueError):
    pass


class DomainError(SegPipeError, ValueError):
    pass


class GeometryError(SegPipeError, ValueError):
    pass


class ShapeError(SegPipeError, ValueError):
    pass


class NumericsError(SegPipeError, ArithmeticError):
    pass


# dataset / task layout
class EmptyDataset(SegPipeError):
    pass


class InconsistentDataset(SegPipeError):
    pass


class MissingLabel(SegPipeError):
    pass


class DuplicateCase(SegPipeError):
    pass


class TaskExists(SegPipeError):
    pass


class LeakageError(SegPipeError, PermissionError):
    """A guarded stage tried to read from the test partition."""


# plans
class PlanFormatError(SegPipeError, ValueError):
    pass


class VersionError(PlanFormatError):
    pass


class PlanMismatch(SegPipeError):
    pass


# training
class SplitError(SegPipeError):
    pass


class SplitFormatError(SplitError):
    pass


class BudgetError(SegPipeError):
    pass


class ResumeConflict(SegPipeError):
    pass


class CheckpointError(SegPipeError):
    pass


# evaluation
class MissingCase(SegPipeError):
    pass
