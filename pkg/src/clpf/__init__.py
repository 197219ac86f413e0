"""Continuous latent process flows: latent-SDE generative models of
irregularly sampled time series with continuously indexed flow decoders."""

from . import autodiff, flows, nn, processes, training
from .model import ClpfModel, ModelConfig, make_variant

__all__ = [
    "autodiff",
    "flows",
    "nn",
    "processes",
    "training",
    "ClpfModel",
    "ModelConfig",
    "make_variant",
]

__version__ = "0.1.0"
