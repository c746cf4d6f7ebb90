"""Exception types shared across the harness."""


class EmbenchError(Exception):
    """Base class for all harness errors."""


class FormatError(EmbenchError):
    """Bad magic bytes or unsupported version in a binary file."""


class TruncationError(EmbenchError):
    """File payload shorter than its header declares."""


class DuplicateError(EmbenchError):
    """A key that must be unique appeared more than once."""


class RangeError(EmbenchError):
    """An index fell outside the valid range of its table."""


class LabelKindError(EmbenchError):
    """Classification and regression labels mixed within one task."""


class LabelConflictError(EmbenchError):
    """Members of one bag carry different labels."""


class EmptyOverlapError(EmbenchError):
    """Spot aggregation requested but every overlap area is zero."""


class InfeasibleError(EmbenchError):
    """Requested fold layout cannot be satisfied by the available units."""


class ArgumentError(EmbenchError):
    """An argument violates a documented precondition."""


class ShapeError(EmbenchError):
    """Array dimensions incompatible with the fitted model."""


class DegenerateFoldError(EmbenchError):
    """A training fold is missing at least one class."""


class EmptyBagError(EmbenchError):
    """A bag with zero instances reached the MIL forward pass."""


class DivergenceError(EmbenchError):
    """Training loss became non-finite."""

    def __init__(self, message: str, epoch: int, step: int):
        super().__init__(message)
        self.epoch = epoch
        self.step = step


class UndefinedError(EmbenchError):
    """Metric has no defined value on this input (e.g. R^2 with constant truth)."""


class AlignmentError(EmbenchError):
    """Paired tables disagree on row count or ordering."""


class ConfigError(EmbenchError):
    """Invalid or unknown configuration content."""
