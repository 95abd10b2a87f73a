class NonFiniteError(ValueError):
    """Raised when an input or intermediate quantity is NaN or infinite."""


class FormatError(ValueError):
    """Base class for on-disk format problems (datasets and checkpoints)."""

    code = "format-error"


class MissingFileError(FormatError, FileNotFoundError):
    code = "missing-file"


class VersionMismatchError(FormatError):
    code = "version-mismatch"


class RowCountMismatchError(FormatError):
    code = "row-count-mismatch"


class ShapeMismatchError(FormatError):
    code = "shape-mismatch"


class EmptyDatasetError(RuntimeError):
    pass


class NonFiniteLossError(FloatingPointError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
