"""Unified multimodal encoder with contrastive pretraining, adaptation and
alignment, built on a minimal reverse-mode tensor engine."""

from .autodiff import Tensor, backward, finite_diff_grad_check, no_grad
from .encoder import EncoderConfig, ModalityBatch, ModalitySample, OmniEncoder

__all__ = [
    "Tensor",
    "backward",
    "finite_diff_grad_check",
    "no_grad",
    "EncoderConfig",
    "ModalityBatch",
    "ModalitySample",
    "OmniEncoder",
]

__version__ = "0.1.0"
