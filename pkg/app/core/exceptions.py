"""
Exception hierarchy shared by every MISApp service.
"""

from typing import Any, Optional


class MISAppError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(MISAppError):
    """Raised when a primitive receives tensors of non-conforming shapes."""

    def __init__(self, primitive: str, *shapes: Any, detail: str = "") -> None:
        self.primitive = primitive
        self.shapes = shapes
        rendered = " and ".join(str(tuple(s)) for s in shapes)
        message = f"{primitive}: incompatible shapes {rendered}"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)


class NumericError(MISAppError):
    """Raised for invalid numeric requests (non-scalar roots, empty axes, NaNs)."""


class DataError(MISAppError):
    """Raised for input data that cannot be used (PAD targets, empty libraries)."""


class ConfigurationError(MISAppError):
    """Raised when a configuration value is missing or invalid."""

    def __init__(self, field: str, message: str) -> None:
        self.field = field
        super().__init__(f"{field}: {message}")


class TrainingDivergedError(MISAppError):
    """
    Raised when the training loss becomes non-finite.

    ``last_good`` holds the parameters at the start of the failing epoch,
    ``best`` the best-validation parameters when an epoch was selected.
    """

    def __init__(self, epoch: int, last_good: Optional[dict] = None, best: Optional[dict] = None) -> None:
        self.epoch = epoch
        self.last_good = last_good
        self.best = best
        super().__init__(f"training loss became non-finite at epoch {epoch}")

    @property
    def recoverable(self) -> Optional[dict]:
        return self.best if self.best is not None else self.last_good
