"""Exception types shared across the toolkit."""


class FrucError(Exception):
    """Base class for all toolkit errors."""


class InvalidInputError(FrucError):
    """An argument violates an operation's precondition."""


class FormatError(FrucError):
    """A file could not be parsed; carries the byte offset of the failure."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class OutOfRangeError(FrucError):
    """A frame index or window does not fit inside the video."""
