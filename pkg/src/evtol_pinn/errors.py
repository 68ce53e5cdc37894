"""Exception hierarchy shared by all modules."""


class EvtolPinnError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(EvtolPinnError, ValueError):
    """A numeric argument is non-finite, out of range, or mis-shaped."""


class ConfigError(EvtolPinnError):
    """Configuration file or parameter set fails validation."""


class FitError(EvtolPinnError):
    """Parameter identification or normalizer fitting could not proceed."""


class TrainingError(EvtolPinnError):
    """Training diverged or produced non-finite activations."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


class SchemaError(EvtolPinnError):
    """An input table lacks a mapped column."""


class DataError(EvtolPinnError):
    """An input table is malformed (e.g. time runs backwards)."""

    def __init__(self, message: str, row: int | None = None):
        super().__init__(message)
        self.row = row
