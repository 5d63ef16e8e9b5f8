"""Silhouette + SMPL gait recognition with task-token attribute heads, on a numpy autodiff core."""
from .config import Config, DataConfig, LossWeights, ModelConfig, TrainConfig, load_config
from .errors import (
    ComboGaitError,
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    FormatError,
    LabelError,
    NumericError,
    ProtocolError,
    ValidationError,
)
from .model import ComboGaitModel, ForwardResult

__version__ = "0.1.0"

__all__ = [
    "ComboGaitError",
    "ComboGaitModel",
    "Config",
    "ConfigError",
    "ContractError",
    "DataConfig",
    "DataError",
    "DimensionError",
    "FormatError",
    "ForwardResult",
    "LabelError",
    "LossWeights",
    "ModelConfig",
    "NumericError",
    "ProtocolError",
    "TrainConfig",
    "ValidationError",
    "load_config",
]
