"""Two-branch convolutional classifier with channel attention, built on a small numpy autodiff core."""

from .config import ModelConfig, RunSpec, TrainConfig, parse_config
from .estimator import CharacterPreprocessor, MANETLClassifier
from .exceptions import (CheckpointError, ConfigParseError, ConfigurationError, DataError,
                         DimensionError, FormatError, FusionError, ManetlError, NumericalError)
from .model import MANETL
from .tensor import Parameter, Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "MANETL",
    "CharacterPreprocessor",
    "CheckpointError",
    "ConfigParseError",
    "ConfigurationError",
    "DataError",
    "DimensionError",
    "FormatError",
    "FusionError",
    "MANETLClassifier",
    "ManetlError",
    "ModelConfig",
    "NumericalError",
    "Parameter",
    "RunSpec",
    "Tensor",
    "TrainConfig",
    "no_grad",
    "parse_config",
]
