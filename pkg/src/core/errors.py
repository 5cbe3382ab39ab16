"""Exception hierarchy shared by every module."""

from __future__ import annotations

from typing import Any


class SpowlError(Exception):
    """Base class for all errors raised by the package."""


class ConfigurationError(SpowlError, ValueError):
    """Invalid settings, or tensors whose widths do not match the configured shapes."""


class UsageError(SpowlError, RuntimeError):
    """An API was called in a state that does not allow it."""


class CheckpointError(SpowlError, RuntimeError):
    """A checkpoint could not be read or was written by an incompatible format version."""


class TrainingError(SpowlError, RuntimeError):
    """A loss or a parameter became non-finite."""

    def __init__(self, message: str, context: dict[str, Any] | None = None) -> None:
        super().__init__(message)
        self.context = dict(context or {})

    def __str__(self) -> str:
        base = super().__str__()
        if not self.context:
            return base
        details = ', '.join(f'{key}={value}' for key, value in self.context.items())
        return f'{base} ({details})'
