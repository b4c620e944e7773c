"""Patch-wise hyperspectral image classification with centered snake scans,
selective state-space encoders, weighted scan fusion, and multi-scale training."""

from .autodiff import NumericError, Tensor, finite_diff_grad, grad, no_grad
from .data import DataError, HsiCube, LabelMap, SplitManifest
from .model import MimConfig, MimModel, load_checkpoint, save_checkpoint, train_model

__all__ = [
    "DataError",
    "HsiCube",
    "LabelMap",
    "MimConfig",
    "MimModel",
    "NumericError",
    "SplitManifest",
    "Tensor",
    "finite_diff_grad",
    "grad",
    "load_checkpoint",
    "no_grad",
    "save_checkpoint",
    "train_model",
]
