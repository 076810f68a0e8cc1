"""Exception hierarchy shared across the pipeline."""


class DicovaError(Exception):
    """Base class for all pipeline errors."""


class DecodeError(DicovaError):
    """Raised when a WAV container cannot be decoded."""


class ConfigError(DicovaError):
    """Raised for invalid configuration or unusable data layouts."""


class ManifestError(DicovaError):
    """Raised when a manifest CSV violates its format."""


class ShapeError(DicovaError, ValueError):
    """Raised when array shapes disagree."""


class CheckpointError(DicovaError):
    """Raised for malformed or mismatched checkpoint files."""


class NumericalAbort(DicovaError):
    """Raised when training produces a non-finite loss."""

    def __init__(self, epoch, batch, loss):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")
