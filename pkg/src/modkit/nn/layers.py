"""Network building blocks: dense, convolution, pooling, residual, U-shaped.

Weights are initialized with fan-in-scaled uniform draws from a seeded
generator, so a (seed, architecture) pair always produces the same network.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from . import tensor as T
from .tensor import Parameter, Tensor


def _uniform_init(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Module:
    """Minimal module: callable, owns parameters, composable."""

    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        seen: set[int] = set()
        for _, p in self.named_parameters():
            if id(p) not in seen:
                seen.add(id(p))
                out.append(p)
        return out

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}" if prefix else key
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(prefix=f"{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(prefix=f"{name}.{i}.")

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:  # pragma: no cover - abstract
        raise NotImplementedError


class Dense(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        self.weight = Parameter(
            _uniform_init(rng, (in_features, out_features), in_features), "weight"
        )
        self.bias = Parameter(np.zeros(out_features), "bias")

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.weight.shape[0]:
            raise ShapeError(
                f"dense layer expects (N, {self.weight.shape[0]}), got {x.shape}"
            )
        return T.matmul(x, self.weight) + self.bias


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        stride: int = 1,
        pad: int | None = None,
    ):
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(
            _uniform_init(
                rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in
            ),
            "weight",
        )
        self.bias = Parameter(np.zeros(out_channels), "bias")
        self.stride = stride
        self.pad = pad
        self.cache_output = False
        self.last_output: Tensor | None = None

    def forward(self, x: Tensor) -> Tensor:
        out = T.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)
        if self.cache_output:
            self.last_output = out
        return out


class ReLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return T.relu(x)


class MaxPool2d(Module):
    def forward(self, x: Tensor) -> Tensor:
        return T.maxpool2d(x)


class GlobalAvgPool(Module):
    """Mean over the spatial dimensions: (N, C, H, W) -> (N, C)."""

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4:
            raise ShapeError(f"global average pool expects NCHW, got {x.shape}")
        return x.mean(axis=(2, 3))


class Sequential(Module):
    def __init__(self, modules: list[Module]):
        self.steps = list(modules)

    def forward(self, x: Tensor) -> Tensor:
        for m in self.steps:
            x = m(x)
        return x

    def __iter__(self):
        return iter(self.steps)


class ResidualBlock(Module):
    """conv-relu-conv plus the identity shortcut, relu after the sum.

    With the branch weights zeroed the block passes nonnegative inputs
    through unchanged; output shape always equals input shape.
    """

    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv1 = Conv2d(channels, channels, 3, rng)
        self.conv2 = Conv2d(channels, channels, 3, rng)

    def forward(self, x: Tensor) -> Tensor:
        branch = self.conv2(T.relu(self.conv1(x)))
        return T.relu(branch + x)


class DoubleConv(Module):
    """Two 3x3 convolutions, each followed by a rectifier."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        self.conv1 = Conv2d(in_channels, out_channels, 3, rng)
        self.conv2 = Conv2d(out_channels, out_channels, 3, rng)

    def forward(self, x: Tensor) -> Tensor:
        return T.relu(self.conv2(T.relu(self.conv1(x))))


class UpsampleConv(Module):
    """Nearest-neighbor 2x upsample followed by a 3x3 convolution.

    Stands in for a transposed convolution with the same receptive
    behavior and a simpler gradient path.
    """

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        self.conv = Conv2d(in_channels, out_channels, 3, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(T.upsample2_nearest(x))


class UNet(Module):
    """Contracting encoder, bottleneck, and skip-concatenating decoder.

    Encoder level k halves the spatial extent and doubles the channels;
    the decoder mirrors it, concatenating each level's pre-pool features,
    and a final 1x1 convolution emits per-pixel class logits.
    """

    def __init__(
        self,
        in_channels: int,
        num_classes: int,
        base_channels: int,
        depth: int,
        rng: np.random.Generator,
    ):
        chans = [base_channels * 2**i for i in range(depth)]
        self.encoder_channels = tuple(chans)
        self.enc = []
        prev = in_channels
        for c in chans:
            self.enc.append(DoubleConv(prev, c, rng))
            prev = c
        self.bottleneck = DoubleConv(prev, base_channels * 2**depth, rng)
        self.up = []
        self.dec = []
        prev = base_channels * 2**depth
        for c in reversed(chans):
            self.up.append(UpsampleConv(prev, c, rng))
            self.dec.append(DoubleConv(2 * c, c, rng))
            prev = c
        self.head = Conv2d(base_channels, num_classes, 1, rng, pad=0)

    def forward(self, x: Tensor) -> Tensor:
        skips = []
        for enc in self.enc:
            x = enc(x)
            skips.append(x)
            x = T.maxpool2d(x)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.up, self.dec, reversed(skips)):
            x = T.concat([skip, up(x)], axis=1)
            x = dec(x)
        return self.head(x)
