"""Blind image quality assessment with fused transformer and convolutional features."""
from .backbones import BackboneConfig
from .model import FusionOrder, GlintIQA, ModelConfig, build_model, surrogate_config

__version__ = "0.1.0"

__all__ = ["BackboneConfig", "FusionOrder", "GlintIQA", "ModelConfig", "build_model", "surrogate_config"]
