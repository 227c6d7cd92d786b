from .main import main
from .io import ConfigBundle, LossConfig, ModelConfig, SynthConfig, TrainConfig
from .network import FlowNet

__version__ = "0.1.0"

__all__ = [
    "main",
    "ConfigBundle",
    "FlowNet",
    "LossConfig",
    "ModelConfig",
    "SynthConfig",
    "TrainConfig",
]
