"""Exception types shared across the package."""


class RvcError(Exception):
    """Base class for every error raised by rvcdet."""


class ConfigError(RvcError, ValueError):
    """Invalid configuration: bad grid, degenerate range, unknown option."""


class DataError(RvcError, ValueError):
    """Input data is malformed or violates an invariant."""


class FormatError(DataError):
    """A file does not follow its declared on-disk layout."""


class GenerationError(RvcError, RuntimeError):
    """Synthetic data generation ran out of its retry budget."""


class ShapeError(RvcError, ValueError):
    """Array shapes do not agree."""


class ScatterIndexError(RvcError, IndexError):
    """A scatter index points outside the output buckets."""

    def __init__(self, row: int, value: int, dim_size: int):
        super().__init__(f"index {value} at source row {row} is out of range for dim_size={dim_size}")
        self.row = row
        self.value = value
        self.dim_size = dim_size
