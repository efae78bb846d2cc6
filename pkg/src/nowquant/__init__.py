"""Quantile-regression rain nowcasting on synthetic radar archives.

A small NumPy-only stack: a tape-based autodiff engine, a separable-conv
U-net with attention gates, pinball-loss objectives, a storm-cell data
generator with chronological splits, an Adam trainer, and event-based
verification. The ``nowquant`` CLI drives full experiments.
"""

from .data import DatasetManifest, StormParams
from .errors import (ConfigError, ContractError, DataError, DimensionError,
                     FormatError, NowquantError, NumericError, TrainingError)
from .model import ModelConfig, QuantileSpec
from .objectives import LossKind
from .tensor import GradientTape, Tensor, backward
from .training import TrainConfig

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractError", "DataError", "DatasetManifest",
    "DimensionError", "FormatError", "GradientTape", "LossKind", "ModelConfig",
    "NowquantError", "NumericError", "QuantileSpec", "StormParams", "Tensor",
    "TrainConfig", "TrainingError", "backward", "__version__",
]
