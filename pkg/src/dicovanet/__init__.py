"""Imbalanced binary audio classification with a small residual CNN.

Mel-spectrogram features, focal loss, minority augmentation, seeded
training with cross-validation and seed ensembles, all in numpy.
"""

from .config import TrainConfig, load_config
from .errors import CheckpointError, ConfigError, DecodeError, DicovaError, ManifestError, NumericalAbort

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigError",
    "DecodeError",
    "DicovaError",
    "ManifestError",
    "NumericalAbort",
    "TrainConfig",
    "load_config",
]
