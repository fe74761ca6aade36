"""Exception types shared across the package."""


class PreconditionError(ValueError):
    """An input violates a documented precondition."""


class ShapeError(PreconditionError):
    pass


class DegenerateRepresentationError(PreconditionError):
    """A zero vector or zero-variance series where a direction/variance is needed."""

    def __init__(self, message, index=None, partial=None):
        super().__init__(message)
        self.index = index
        # partially computed results a caller may still want to report
        self.partial = partial


class DumpFormatError(OSError):
    """An HSD1 file is malformed (bad magic, version, truncation)."""
