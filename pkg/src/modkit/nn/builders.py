"""Builders for the two small architectures the experiments run on."""

from __future__ import annotations

import numpy as np

from ..errors import ContractError, ShapeError
from ..seeding import rng_for
from . import tensor as T
from .layers import (
    Conv2d,
    Dense,
    GlobalAvgPool,
    MaxPool2d,
    ReLU,
    ResidualBlock,
    Sequential,
    UNet,
)
from .tensor import Tensor, no_grad


def _dry_run(net, input_shape: tuple) -> tuple:
    with no_grad():
        out = net(Tensor(np.zeros((1,) + tuple(input_shape))))
    return out.shape


def build_micro_resnet(
    input_shape: tuple,
    num_classes: int,
    width: int = 8,
    blocks: int = 2,
    seed: int = 0,
) -> Sequential:
    """Residual classifier: stem conv, residual blocks, average pool, dense head.

    A 2x2 max-pool follows the stem and every residual block, so spatial
    extents must divide by 2**(blocks + 1).
    """
    if width < 4:
        raise ContractError(f"width must be >= 4, got {width}")
    if blocks < 1:
        raise ContractError(f"blocks must be >= 1, got {blocks}")
    c, h, w = input_shape
    factor = 2 ** (blocks + 1)
    if h % factor or w % factor or h < factor or w < factor:
        raise ShapeError(
            f"input {h}x{w} too small for the pooling chain (needs multiples of {factor})"
        )
    rng = rng_for(seed, "init", "resnet")
    steps: list = [Conv2d(c, width, 3, rng), ReLU(), MaxPool2d()]
    for _ in range(blocks):
        steps += [ResidualBlock(width, rng), MaxPool2d()]
    steps += [GlobalAvgPool(), Dense(width, num_classes, rng)]
    net = Sequential(steps)
    net.input_shape = tuple(input_shape)
    net.num_classes = num_classes
    net.arch = {
        "family": "micro_resnet",
        "input_shape": list(input_shape),
        "num_classes": num_classes,
        "width": width,
        "blocks": blocks,
        "seed": seed,
    }
    assert _dry_run(net, input_shape) == (1, num_classes)
    return net


def build_micro_unet(
    input_shape: tuple,
    num_classes: int,
    base_channels: int = 8,
    depth: int = 3,
    seed: int = 0,
) -> UNet:
    """U-shaped per-pixel classifier; output spatial shape equals the input's."""
    c, h, w = input_shape
    if h % 2**depth or w % 2**depth:
        raise ShapeError(
            f"input {h}x{w} not divisible by 2**{depth}; the encoder cannot pool"
        )
    rng = rng_for(seed, "init", "unet")
    net = UNet(c, num_classes, base_channels, depth, rng)
    net.input_shape = tuple(input_shape)
    net.num_classes = num_classes
    net.arch = {
        "family": "micro_unet",
        "input_shape": list(input_shape),
        "num_classes": num_classes,
        "base_channels": base_channels,
        "depth": depth,
        "seed": seed,
    }
    assert _dry_run(net, input_shape) == (1, num_classes, h, w)
    return net


def build_from_arch(arch: dict) -> Sequential | UNet:
    """Rebuild a network from the ``arch`` dict a builder attached to it."""
    kind = arch["family"]
    if kind == "micro_resnet":
        return build_micro_resnet(
            tuple(arch["input_shape"]),
            arch["num_classes"],
            width=arch["width"],
            blocks=arch["blocks"],
            seed=arch["seed"],
        )
    if kind == "micro_unet":
        return build_micro_unet(
            tuple(arch["input_shape"]),
            arch["num_classes"],
            base_channels=arch["base_channels"],
            depth=arch["depth"],
            seed=arch["seed"],
        )
    raise ValueError(f"unknown architecture family: {kind!r}")


def forward_batched(net, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Run the network over a batch, without building a gradient graph."""
    outs = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            outs.append(net(Tensor(images[i : i + batch_size])).data)
    return np.concatenate(outs, axis=0)
