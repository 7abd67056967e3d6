"""Exception hierarchy shared by all modules."""


class RsrlError(Exception):
    """Base class for every error raised by this package."""


class ShapeMismatch(RsrlError):
    """Array shapes disagree with what an operation requires."""


class EmptyBatch(RsrlError):
    pass


class EmptyDataset(RsrlError):
    pass


class MissingFile(RsrlError):
    pass


class BadScore(RsrlError):
    """Score label outside the configured [1, N] range."""


class DuplicateId(RsrlError):
    pass


class BadConfig(RsrlError):
    pass


class BadFraction(RsrlError):
    pass


class LengthMismatch(RsrlError):
    pass


class EmptyInput(RsrlError):
    pass


class EmptyMatrix(RsrlError):
    pass


class NoSupportedClass(RsrlError):
    """Every class has zero evaluation support."""


class EmptyResult(RsrlError):
    """A revision pass would drop every training sample."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history if history is not None else []


class SpecMismatch(RsrlError):
    """Two checkpoints or datasets do not share a compatible layout."""


class ZeroVariance(RsrlError):
    """Correlation of a constant map is undefined."""


class AllChannelsDegenerate(RsrlError):
    pass


class BadChannel(RsrlError):
    pass


class IoError(RsrlError):
    """File could not be read, written, or parsed."""


class NumericalError(RsrlError):
    """A computation produced non-finite values."""
