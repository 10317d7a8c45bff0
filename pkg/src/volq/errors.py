"""Exception types shared across the package."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss, gradient, or parameter."""

    def __init__(self, message: str, layer: str | None = None):
        super().__init__(message)
        self.layer = layer


class FormatError(ValueError):
    """A binary file does not match its declared layout."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class BufferNotReady(LookupError):
    """The replay buffer holds fewer transitions than the requested batch."""
