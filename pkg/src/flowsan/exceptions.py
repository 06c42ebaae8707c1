"""Error types raised across the package."""


class FlowSanError(Exception):
    """Base class for all package errors."""


class ConfigurationError(FlowSanError):
    """Invalid generation spec or run configuration."""


class ShapeError(FlowSanError):
    """Incompatible tensor/image shapes or non-integral conv geometry."""


class EmptyClassError(FlowSanError):
    """An operation needed samples of a class (e.g. a gender) that is absent."""


class DegenerateInputError(FlowSanError):
    """Input is structurally unusable: empty minority cohort, single-class
    score set, zero-norm representation vector, and the like."""


class TrainingError(FlowSanError):
    """Training failed: non-finite loss or non-convergence on the train split."""


class UsageError(FlowSanError):
    """API misuse: non-scalar backward, depth out of range, unreadable input."""
