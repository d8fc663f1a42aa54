"""Exception hierarchy shared by all earlycrop modules."""


class EarlyCropError(Exception):
    """Base class for all package errors."""


class ConfigError(EarlyCropError, ValueError):
    """An invalid configuration value."""


class ParseError(EarlyCropError, ValueError):
    """A malformed line in a delimited text file."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(EarlyCropError, ValueError):
    """A file whose columns do not match the expected layout."""


class SplitError(EarlyCropError, ValueError):
    pass


class InferenceError(EarlyCropError, ValueError):
    """Forward pass impossible, e.g. every timestep masked."""


class ModelFormatError(EarlyCropError, ValueError):
    pass


class NumericError(EarlyCropError, FloatingPointError):
    pass


class TrainingError(EarlyCropError, RuntimeError):
    pass


class PruningError(EarlyCropError, ValueError):
    pass
