"""Exception hierarchy shared across the package."""


class AttnLoopError(Exception):
    """Base class for all package errors."""


class ShapeError(AttnLoopError):
    """An array does not have the expected shape."""


class ValidationError(AttnLoopError):
    """A value is outside its allowed domain."""


class NonFiniteError(AttnLoopError):
    """A loss or gradient produced NaN/Inf.

    ``segment`` names the first offending parameter segment, or ``"loss"``
    when the scalar objective itself is non-finite.
    """

    def __init__(self, message: str, segment: str = "loss"):
        super().__init__(message)
        self.segment = segment


class PreconditionError(AttnLoopError):
    """An operation was called with arguments violating its preconditions."""


class MissingInstanceError(AttnLoopError):
    """An annotation refers to an instance id that does not exist."""


class EmptyContextError(AttnLoopError):
    """The annotation store is empty where at least one mask is required."""


class DuplicateError(AttnLoopError):
    """A second annotation was submitted for the same (instance, round)."""


class ParseError(AttnLoopError):
    """A persisted record could not be parsed; carries the line number."""

    def __init__(self, message: str, line: int = -1):
        super().__init__(message)
        self.line = line


class SchemaError(AttnLoopError):
    """A persisted record is well-formed but inconsistent with the dataset."""


class FormatError(AttnLoopError):
    """A binary checkpoint has a bad magic value or unsupported version."""


class CorruptError(AttnLoopError):
    """A binary checkpoint payload fails its length or digest check."""


class TrainingDiverged(AttnLoopError):
    """Training loss became non-finite; carries the last finite parameters."""

    def __init__(self, message: str, last_params=None):
        super().__init__(message)
        self.last_params = last_params


class UndefinedMetricError(AttnLoopError):
    """A metric is undefined for the given labels (e.g. single-class AUROC)."""
