"""Two-stream subspace fusion of genomics and histology features."""

from .data import Dataset, SynthConfig, generate, load, save
from .errors import ConfigError, DataFormatError, TrainingError
from .fusion import FusionConfig
from .metrics import MetricReport
from .trainer import TrainConfig, ablate, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataFormatError",
    "Dataset",
    "FusionConfig",
    "MetricReport",
    "SynthConfig",
    "TrainConfig",
    "TrainingError",
    "ablate",
    "evaluate",
    "generate",
    "load",
    "save",
    "train",
]
