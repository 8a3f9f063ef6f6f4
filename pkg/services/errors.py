# services/errors.py
"""Exceptions raised by the label-shift adapter toolkit."""
from gradcore import DimensionError as _GradDimensionError


class ShiftAdaptError(Exception):
    """Base class for every toolkit error."""


class DimensionError(ShiftAdaptError, _GradDimensionError):
    """Shape mismatch between operands."""


class InputError(ShiftAdaptError, ValueError):
    """Invalid labels, empty batches or malformed distributions."""


class DegenerateBatchError(InputError):
    """Batch statistics requested on fewer than two samples."""


class StageError(ShiftAdaptError, RuntimeError):
    """Operation run while the model is in the wrong training stage."""


class DivergenceError(ShiftAdaptError, ArithmeticError):
    """A loss became non-finite."""

    def __init__(self, message: str, step: int = None, loss: float = None):
        super().__init__(message)
        self.step = step
        self.loss = loss


class CheckpointError(ShiftAdaptError, ValueError):
    """Checkpoint missing, truncated or in an unknown format."""


class ConfigError(ShiftAdaptError, ValueError):
    """Unknown or unparsable configuration."""


class InfeasibleScenarioError(ShiftAdaptError, ValueError):
    """Scenario would give some class fewer than one sample."""
