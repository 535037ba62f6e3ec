"""Minimal gradient-checked neural-network kernel (numpy, double precision).

Only the fixed layer set the detector needs: valid convolution over the
frame axis, ReLU, batch normalization, order-preserving k-max pooling,
dense layers, sigmoid, binary cross-entropy with L2 regularization, and
Adam. No general autograd: the network graph is fixed and its backward
pass is written out explicitly.
"""

from .layers import (
    BatchNormParams,
    ConvLayerParams,
    DenseParams,
    batch_norm_forward,
    conv_valid,
    dense,
    kmax_pool,
    relu,
    sigmoid,
)
from .loss import bce_l2_loss
from .optim import AdamState, adam_step
from .gradcheck import GradCheckReport, grad_check

__all__ = [
    "AdamState",
    "BatchNormParams",
    "ConvLayerParams",
    "DenseParams",
    "GradCheckReport",
    "adam_step",
    "batch_norm_forward",
    "bce_l2_loss",
    "conv_valid",
    "dense",
    "grad_check",
    "kmax_pool",
    "relu",
    "sigmoid",
]
