"""View-decoupled transformer for aerial-ground person re-identification."""
from .model import ModelConfig, ModelParams, extract_features, forward, heads, paper_scale_config
from .objectives import LossConfig, vdt_losses
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = ["ModelConfig", "ModelParams", "LossConfig", "TrainConfig", "extract_features",
           "forward", "heads", "paper_scale_config", "train", "vdt_losses"]
