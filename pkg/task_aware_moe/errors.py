"""Exception hierarchy for the task-aware MoE toolkit."""

from typing import Iterable, Optional, Sequence


class TaskMoeError(Exception):
    """Base class for every error raised by this package"""


class DimensionError(TaskMoeError, ValueError):
    """Operand shapes are incompatible"""

    def __init__(self, message: str, shapes: Optional[Sequence[tuple]] = None):
        self.shapes = tuple(shapes or ())
        if self.shapes:
            message = f"{message} (shapes: {', '.join(str(s) for s in self.shapes)})"
        super().__init__(message)


class ContractError(TaskMoeError, RuntimeError):
    """A precondition or usage contract was violated"""


class ConfigError(TaskMoeError, ValueError):
    """Invalid configuration"""

    def __init__(self, message: str, keys: Iterable[str] = ()):
        self.keys = sorted(keys)
        if self.keys:
            message = f"{message}: {', '.join(self.keys)}"
        super().__init__(message)


class EmptyReductionError(TaskMoeError, ValueError):
    """A mean or normalization was requested over zero elements"""


class TokenRangeError(TaskMoeError, IndexError):
    """A token or target index lies outside the vocabulary"""


class NumericError(TaskMoeError, ArithmeticError):
    """A NaN or Inf was produced where a finite value is required"""


class CheckpointError(TaskMoeError, OSError):
    """Checkpoint file is missing, truncated or malformed"""
