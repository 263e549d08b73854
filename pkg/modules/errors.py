"""Exception hierarchy shared by every cromekit module."""

from typing import Optional


class CromeError(Exception):
    """Base class for all cromekit failures."""


class ConfigError(CromeError, ValueError):
    """A configuration value, flag combination or argument failed validation."""


class ShapeError(CromeError, ValueError):
    """Operand shapes are incompatible."""


class DegenerateBatchError(CromeError):
    """Batch statistics cannot be computed (e.g. train-mode batch norm on one row)."""


class DegenerateVectorError(CromeError):
    """A zero-norm vector reached a cosine similarity."""


class OptimizerStateError(CromeError):
    """Optimizer moments do not match the parameters they are applied to."""


class GradientCheckError(CromeError):
    """The gradient check could not be carried out (non-finite loss)."""


class NonFiniteLossError(CromeError):
    """Training produced a NaN or infinite loss."""


class DatasetError(CromeError):
    """A dataset violates a structural requirement (e.g. a class has no samples)."""


class ParseError(DatasetError):
    """A dataset file line could not be parsed."""

    def __init__(self, message: str, line_number: Optional[int] = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class SchemaError(DatasetError):
    """A dataset file disagrees with its own header or uses an unsupported version."""


class CheckpointError(CromeError):
    """A checkpoint file is missing, corrupt or of an unsupported version."""
