"""Minimal reverse-mode autodiff for the localization net."""

from .layers import Conv2d
from .ops import (
    ACTIVATIONS,
    DegenerateHeatmapError,
    aed_loss,
    ased_loss,
    avgpool2,
    bilinear_up2_matrix,
    com_readout,
    concat,
    conv2d,
    leaky_relu,
    mse_loss,
    relu,
    sigmoid,
    softmax2d,
    upsample2,
)
from .optim import Adam, AdamState, adam_step
from .tensor import Tensor

__all__ = [
    "ACTIVATIONS", "Adam", "AdamState", "Conv2d", "DegenerateHeatmapError", "Tensor", "adam_step",
    "aed_loss", "ased_loss", "avgpool2", "bilinear_up2_matrix", "com_readout", "concat", "conv2d",
    "leaky_relu", "mse_loss", "relu", "sigmoid", "softmax2d", "upsample2",
]
