"""Exception hierarchy shared by every lorax module."""


class LoraxError(Exception):
    """Base class for all lorax errors."""


class FormatError(LoraxError):
    """A tensor container file is malformed.

    ``offset`` is the byte position in the file where the problem was
    detected, when known.
    """

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class UnsupportedTensor(LoraxError):
    pass


class IoError(LoraxError, OSError):
    pass


class NumericsError(LoraxError, ArithmeticError):
    pass


class InvalidRank(LoraxError, ValueError):
    pass


class ShapeError(LoraxError, ValueError):
    pass


class BasisMismatch(LoraxError):
    pass


class DegenerateInput(LoraxError, ValueError):
    pass


class IncompleteReport(LoraxError):
    pass


class OracleOutOfRange(LoraxError, ValueError):
    pass


class TrainingDiverged(LoraxError, ArithmeticError):
    pass


class InvalidSpec(LoraxError, ValueError):
    pass


class InvalidBundle(LoraxError, ValueError):
    """A bundle violates its own invariants (e.g. duplicate keys)."""


class EmptyTransfer(UserWarning):
    """Warning category: no module survived matching, nothing was transferred."""


class ClampNotice(UserWarning):
    """Warning category: a requested rank was clamped to the available rank."""
