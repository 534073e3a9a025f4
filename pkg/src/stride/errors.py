"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor extents do not agree with what an operation expects."""


class NonFiniteGradientError(FloatingPointError):
    """A gradient contained NaN or inf; the optimizer refused the update."""


class FormatError(Exception):
    """Base class for artifact load failures."""


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class InvariantError(FormatError):
    """The file parsed but its contents violate a data invariant."""


class CsvFormatError(FormatError, ValueError):
    """A CSV is missing columns or holds an unparseable cell (message names row and column)."""


class TaskMismatchError(ValueError):
    """A model was used for a task other than the one it was built for."""


class ConvergenceWarning(UserWarning):
    pass
