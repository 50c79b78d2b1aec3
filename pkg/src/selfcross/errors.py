"""Exception hierarchy shared across the package."""


class SelfCrossError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(SelfCrossError, ValueError):
    """Tensor shapes or grids do not line up."""


class NumericError(SelfCrossError, ValueError):
    """Non-finite or otherwise unusable numeric input."""


class ConfigurationError(SelfCrossError, ValueError):
    """Invalid configuration, e.g. empty selections or bad step windows."""


class DegenerateMapError(SelfCrossError, ValueError):
    """An attention map is constant or all-zero and cannot be processed."""


class DegenerateMaskError(SelfCrossError, ValueError):
    """A subject mask is empty or carries zero total weight."""


class TraceFormatError(SelfCrossError, ValueError):
    """Malformed trace stream. Subclasses identify the failure mode."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TraceMagicError(TraceFormatError):
    """Stream does not start with the expected magic bytes."""


class TraceVersionError(TraceFormatError):
    """Stream declares an unsupported format version."""


class TraceTruncationError(TraceFormatError):
    """Stream ends before the declared content is complete."""


class TraceCountError(TraceFormatError):
    """Declared block count disagrees with the actual stream content."""


class PromptFormatError(SelfCrossError, ValueError):
    """Malformed prompt-set file; carries the offending line number."""

    def __init__(self, message: str, line_number: int | None = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class EmptyInputError(SelfCrossError, ValueError):
    """An aggregation was asked to run over zero usable inputs."""


class EndpointAuthError(SelfCrossError, RuntimeError):
    """The scoring endpoint rejected our credentials."""
