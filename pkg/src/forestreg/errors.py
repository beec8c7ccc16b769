"""Exception hierarchy shared by every stage of the pipeline."""

from __future__ import annotations


class ForestRegError(Exception):
    """Base class. ``stage`` is filled in by the pipeline when an error crosses a stage boundary."""

    def __init__(self, message: str, stage: str | None = None):
        super().__init__(message)
        self.stage = stage

    def __str__(self) -> str:
        msg = super().__str__()
        return f"[{self.stage}] {msg}" if self.stage else msg


class ValidationError(ForestRegError, ValueError):
    """An argument or file violates a documented invariant."""


class ParseError(ForestRegError, ValueError):
    """A file could not be parsed in the declared format."""


class InsufficientDataError(ForestRegError):
    pass


class EmptyResultError(ForestRegError):
    pass


class EmptyStemMapError(EmptyResultError):
    pass


class DegenerateGeometryError(ForestRegError):
    pass


class NoLocalMatchesError(ForestRegError):
    pass


class InsufficientCorrespondencesError(ForestRegError):
    pass


class NoOverlapError(ForestRegError):
    pass


class LayoutError(ForestRegError):
    pass


class SpecError(ForestRegError, ValueError):
    pass


def with_stage(stage: str, fn, *args, **kwargs):
    """Call ``fn`` and tag any untagged pipeline error it raises with ``stage``."""
    try:
        return fn(*args, **kwargs)
    except ForestRegError as exc:
        if exc.stage is None:
            exc.stage = stage
        raise
