"""Prompt-tuned RGB-X semantic segmentation on a frozen transformer encoder."""

from .backbone import BackboneConfig, ConfigError, backbone_preset
from .model import DPLNet, DPLNetConfig, count_parameters, dplnet_config, dplnet_forward, partition_parameters
from .prompts import PromptConfig, ValidationError

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig", "ConfigError", "backbone_preset", "DPLNet", "DPLNetConfig", "count_parameters",
    "dplnet_config", "dplnet_forward", "partition_parameters", "PromptConfig", "ValidationError",
]
