"""Minimal autodiff engine and the transformer blocks built on it."""

from .model import (
    EncoderConfig,
    SatFormulaModel,
    SeqModelConfig,
    decoder_probs,
    expression_encoder_forward,
    feature_fusion,
    image_encoder_forward,
)
from .optim import Adam, adam_step
from .tensor import Tensor, no_grad

__all__ = [
    "Adam",
    "EncoderConfig",
    "SatFormulaModel",
    "SeqModelConfig",
    "Tensor",
    "adam_step",
    "decoder_probs",
    "expression_encoder_forward",
    "feature_fusion",
    "image_encoder_forward",
    "no_grad",
]
