"""Exception hierarchy shared by every fedsim module."""


class FedsimError(Exception):
    """Base class for all fedsim errors."""


class ConfigError(FedsimError, ValueError):
    """Invalid configuration, architecture or shape mismatch."""


class InputError(FedsimError, ValueError):
    """Invalid argument passed to an operation."""


class DegenerateBatchError(FedsimError, ValueError):
    """Train-mode batch normalization needs at least two samples."""


class TrainingDivergenceError(FedsimError, ArithmeticError):
    """A loss or gradient became non-finite."""


class PartitionError(FedsimError):
    """The partitioner could not satisfy its constraints."""


class SplitError(FedsimError, ValueError):
    """A shard is too small to split into train and test sets."""


class CsvFormatError(FedsimError, ValueError):
    """Malformed CSV dataset file."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class StatisticsError(FedsimError, ValueError):
    """Not enough data to estimate statistics."""
