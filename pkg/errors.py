"""
Exception hierarchy shared by every module of the reaction planner.
"""


class ReactionError(Exception):
    """Base class for all planner errors."""


class InvalidInputError(ReactionError, ValueError):
    """Arguments violate an operation's preconditions."""


class DegenerateInputError(InvalidInputError):
    """Input is well-formed but numerically degenerate (parallel 6D columns, zero-norm vectors)."""


class StateError(ReactionError):
    """Operation called in the wrong order, e.g. backward without a recorded forward."""


class TrainingError(ReactionError):
    """Training hit a non-finite loss or gradient."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}

    def __str__(self):
        if not self.diagnostics:
            return super().__str__()
        details = ', '.join(f"{key}={value}" for key, value in self.diagnostics.items())
        return f"{super().__str__()} ({details})"


class ParseError(ReactionError):
    """Malformed motion or manifest file."""

    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


class UnsupportedVersionError(ReactionError):
    """File carries a format tag or version this code cannot read."""


class StreamExhaustedError(ReactionError):
    """Actor stream ended before enough frames were delivered."""


class SinkError(ReactionError):
    """Writing reactor frames to the sink failed."""


class ValidationError(ReactionError):
    """Configuration or skeleton validation failed before any work started."""
