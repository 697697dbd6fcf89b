"""Exception hierarchy shared by every semlink module."""


class SemlinkError(Exception):
    """Base class for all semlink errors."""


class ShapeError(SemlinkError, ValueError):
    """Array or layer dimensions do not line up."""


class ContractError(SemlinkError, ValueError):
    """An operation was called outside its contract (wrong activation, terminal step, ...)."""


class MappingError(SemlinkError, KeyError):
    """A class index has no roadblock entry in the class map."""


class FormatError(SemlinkError, ValueError):
    """Malformed binary or text file.

    ``offset`` is the byte (or line) position where decoding failed.
    """

    def __init__(self, message, offset=0):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class ProtocolError(SemlinkError):
    """Malformed or oversized SLP/1 frame, or an unexpected disconnect."""
