"""Exception taxonomy shared across the package."""


class TicNetError(Exception):
    """Base class for all package errors."""


class ParseError(TicNetError):
    """A file could not be parsed (bad row, bad header, bad magic)."""


class DataError(TicNetError):
    """Input data violates a content contract (non-finite, empty, inverted)."""


class GenerationError(TicNetError):
    """Synthetic data could not be generated under the given config."""


class ConfigError(TicNetError):
    """A configuration value is invalid or inconsistent."""


class ShapeError(TicNetError):
    """Tensor/array shape does not match what the operation expects."""


class ContractError(TicNetError):
    """A runtime precondition was violated by the caller."""


class TrainingError(TicNetError):
    """Optimization produced a non-finite loss or otherwise failed."""

    def __init__(self, message, batch_ids=None):
        super().__init__(message)
        self.batch_ids = list(batch_ids) if batch_ids else []


class FormatError(TicNetError):
    """A serialized artifact (checkpoint, anchor file) is corrupt."""


class VersionError(TicNetError):
    """A serialized artifact does not match the expected config/version."""


class FoldError(TicNetError):
    """A cross-validation fold is degenerate (e.g. no training annotations)."""


class UsageError(TicNetError):
    """The CLI was invoked incorrectly (missing checkpoint, bad flag combo)."""
