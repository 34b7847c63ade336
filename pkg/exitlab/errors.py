"""
Exception hierarchy for exitlab.

Every error raised on purpose by the package derives from ``ExitLabError`` and
from the builtin it refines, so callers can catch either.
"""

from typing import Optional


class ExitLabError(Exception):
    """Base class for all exitlab errors."""


class ShapeError(ExitLabError, ValueError):
    """Array or patch shapes do not line up."""


class SchemaError(ExitLabError, ValueError):
    """Key dimensions or key layouts are inconsistent."""


class ArgumentError(ExitLabError, ValueError):
    """An argument is outside its valid range."""


class DegenerateInputError(ExitLabError, ValueError):
    """Input too small or too uniform for the requested statistic."""


class UndefinedCorrelationError(DegenerateInputError):
    """Rank correlation is undefined for a constant sequence."""


class NotFoundError(ExitLabError, LookupError):
    """Nothing to return, e.g. an empty database partition."""


class UnknownExitError(ExitLabError, LookupError):
    """The exit id names neither a branch nor the backbone."""


class ConfigError(ExitLabError, ValueError):
    """Experiment configuration is unusable."""


class FormatError(ExitLabError, ValueError):
    """A binary stream is malformed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class FixtureError(ExitLabError, ValueError):
    """An architecture fixture file cannot be parsed."""

    def __init__(self, message: str, line: Optional[int] = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")
        self.line = line


class DivergenceError(ExitLabError, ArithmeticError):
    """Training produced a non-finite loss or parameter."""

    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


class StageError(ExitLabError, RuntimeError):
    """A pipeline stage failed; the original error is chained as __cause__."""

    def __init__(self, stage: str, reason: str):
        super().__init__(f"stage '{stage}' failed: {reason}")
        self.stage = stage
