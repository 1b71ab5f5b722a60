"""QP-threshold prediction and QP-map coding toolkit."""

__version__ = "0.1.0"

from .errors import (
    AdapterError,
    ConfigError,
    ContractError,
    DataIOError,
    FormatError,
    NumericError,
    ShapeError,
    ValidationError,
)
from .labels import gaussian_soft_labels, one_hot, smooth_labels, soft_cross_entropy
from .model import DTJRDModel, ModelConfig, interpolate_pos_embed, patchify, predict_jrd
from .checkpoint import load_checkpoint, save_checkpoint
from .tensor import Parameter, Tensor
from .train import TrainConfig, cosine_lr, fit, freeze_mask, sgd_momentum_step

__all__ = [
    "AdapterError",
    "ConfigError",
    "ContractError",
    "DataIOError",
    "DTJRDModel",
    "FormatError",
    "ModelConfig",
    "NumericError",
    "Parameter",
    "ShapeError",
    "Tensor",
    "TrainConfig",
    "ValidationError",
    "cosine_lr",
    "fit",
    "freeze_mask",
    "gaussian_soft_labels",
    "interpolate_pos_embed",
    "load_checkpoint",
    "one_hot",
    "patchify",
    "predict_jrd",
    "save_checkpoint",
    "sgd_momentum_step",
    "smooth_labels",
    "soft_cross_entropy",
]
