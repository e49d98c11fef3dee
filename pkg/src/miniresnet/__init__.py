"""Parameter-reduced residual networks for head-pose regression."""

from .model import (
    CANONICAL,
    RESNET18_64,
    RESNET18_112,
    RESNET34_112,
    ModelConfig,
    Network,
    build_model,
    count_parameters,
    load_weights,
    save_weights,
)
from .training import TrainingConfig, init_weights, lr_at_epoch, run_protocol, train

__version__ = "0.1.0"

__all__ = [
    "CANONICAL",
    "RESNET18_64",
    "RESNET18_112",
    "RESNET34_112",
    "ModelConfig",
    "Network",
    "TrainingConfig",
    "build_model",
    "count_parameters",
    "init_weights",
    "load_weights",
    "lr_at_epoch",
    "run_protocol",
    "save_weights",
    "train",
]
