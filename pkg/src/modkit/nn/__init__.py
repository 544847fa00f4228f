"""Differentiable-computation backend: tensors, layers, losses, optimizers."""

from .builders import build_from_arch, build_micro_resnet, build_micro_unet, forward_batched
from .layers import (
    Conv2d,
    Dense,
    DoubleConv,
    GlobalAvgPool,
    MaxPool2d,
    Module,
    ReLU,
    ResidualBlock,
    Sequential,
    UNet,
    UpsampleConv,
)
from .losses import composite_risk, cross_entropy, cross_entropy_per_sample, squared_error
from .optim import SGD, Adam, make_optimizer
from .tensor import (
    Parameter,
    Tensor,
    concat,
    conv2d,
    reduce_mean,
    reduce_sum,
    reshape,
    transpose,
    is_grad_enabled,
    maxpool2d,
    no_grad,
    relu,
    softmax,
    upsample2_nearest,
)
from .training import train
from .io import load_params, read_param_file, save_params

__all__ = [
    "Adam",
    "Conv2d",
    "Dense",
    "DoubleConv",
    "GlobalAvgPool",
    "MaxPool2d",
    "Module",
    "Parameter",
    "ReLU",
    "ResidualBlock",
    "SGD",
    "Sequential",
    "Tensor",
    "UNet",
    "UpsampleConv",
    "build_from_arch",
    "build_micro_resnet",
    "build_micro_unet",
    "composite_risk",
    "concat",
    "conv2d",
    "cross_entropy",
    "cross_entropy_per_sample",
    "forward_batched",
    "is_grad_enabled",
    "load_params",
    "make_optimizer",
    "maxpool2d",
    "no_grad",
    "read_param_file",
    "reduce_mean",
    "reduce_sum",
    "relu",
    "reshape",
    "transpose",
    "save_params",
    "softmax",
    "squared_error",
    "train",
    "upsample2_nearest",
]
