"""Exception types shared across the package."""


class DomainError(ValueError):
    """An input violated a documented precondition."""


class MidiIOError(OSError):
    """A MIDI file could not be read.

    Parameters
    ----------
    message : str
        What went wrong.
    offset : int or None
        Byte offset into the file where parsing failed.
    """

    def __init__(self, message, offset=None):
        self.reason = message
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
