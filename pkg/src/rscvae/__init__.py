"""Recoding VAE with latent-consistency regularization for one-class novelty detection."""

from .config import RunConfig, load_config
from .errors import (
    ConfigError,
    DataError,
    InvalidInputError,
    NonFiniteLossError,
    ParseError,
    ShapeError,
)
from .latent import DiagonalGaussian, js_between, kl_between, kl_to_standard, reparameterize
from .losses import ForwardTrace, LossWeights, batch_objective
from .networks import EncoderSpec, RecodingVAE, load_checkpoint, save_checkpoint
from .scoring import auroc, correspondence_indicator, evaluate

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "DiagonalGaussian", "EncoderSpec", "ForwardTrace",
    "InvalidInputError", "LossWeights", "NonFiniteLossError", "ParseError", "RecodingVAE",
    "RunConfig", "ShapeError", "auroc", "batch_objective", "correspondence_indicator",
    "evaluate", "js_between", "kl_between", "kl_to_standard", "load_checkpoint",
    "load_config", "reparameterize", "save_checkpoint",
]
