"""Exception hierarchy shared across the package.

Every error raised deliberately by this package derives from TriageError so
callers (and the command line driver) can separate our failures from plain
environment problems like a missing file.
"""


class TriageError(Exception):
    """Base class for all errors raised by meltriage."""


class ValidationError(TriageError):
    """Some input value or combination of values is not acceptable."""


class FormatError(TriageError):
    """A file or byte stream does not conform to its declared format."""


class MetricUndefinedError(ValidationError):
    """A requested metric has no defined value on the given data.

    Raised, for example, when a ranking metric is asked for on a score set
    that contains only one class.
    """


class NumericError(TriageError):
    """A numeric computation produced non-finite values.

    ``layer_index`` identifies the first transformer block whose output was
    non-finite. Failures before the block stack (embedding) carry -1; the
    final norm and classifier head carry the block count.
    """

    def __init__(self, message: str, layer_index: int = -1):
        super().__init__(message)
        self.layer_index = layer_index
