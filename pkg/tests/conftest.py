"""Shared helpers: finite-difference gradient checks and micro-net zoo.

The gradient checker is the independent route against which the autodiff
engine is judged, so it deliberately knows nothing about the graph: it
re-evaluates the full forward closure around perturbed parameter entries.
"""

from __future__ import annotations

import numpy as np

from modkit.nn import (
    Conv2d,
    Dense,
    GlobalAvgPool,
    MaxPool2d,
    ReLU,
    ResidualBlock,
    Sequential,
    Tensor,
    build_micro_unet,
    reduce_sum,
)


def central_difference(f, param, index, eps: float = 1e-5) -> float:
    """d f / d param[index] by central differences, f re-run from scratch."""
    flat = param.data.reshape(-1)
    old = flat[index]
    flat[index] = old + eps
    hi = f().item()
    flat[index] = old - eps
    lo = f().item()
    flat[index] = old
    return (hi - lo) / (2.0 * eps)


def max_relative_grad_error(f, params, rng, samples_per_param: int = 5) -> float:
    """Compare backward() gradients of scalar f against central differences.

    Checks a random subset of entries per parameter and returns the worst
    relative error. The normaliser has a 1e-3 floor: below that magnitude
    the finite-difference estimate itself is dominated by float64
    cancellation noise (~|f|*1e-16/eps), so a pure relative error would
    measure the oracle's conditioning, not the gradient.
    """
    loss = f()
    for p in params:
        p.grad = np.zeros_like(p.data)
    loss.backward()
    worst = 0.0
    for p in params:
        flat_grad = p.grad.reshape(-1)
        count = min(samples_per_param, p.data.size)
        for index in rng.choice(p.data.size, size=count, replace=False):
            numeric = central_difference(f, p, index)
            analytic = flat_grad[index]
            scale = max(abs(numeric), abs(analytic), 1e-3)
            worst = max(worst, abs(numeric - analytic) / scale)
    return worst


def make_micro_net(kind: str, rng: np.random.Generator):
    """Build a tiny network of the requested family plus a matching input.

    Families cover dense stacks, plain conv stacks, pooling, residual
    blocks, and a shrunken encoder-decoder; every variant stays well under
    5k parameters so finite differences remain fast.
    """
    if kind == "dense":
        net = Sequential([Dense(6, 9, rng), ReLU(), Dense(9, 4, rng)])
        x = rng.normal(size=(3, 6))
    elif kind == "conv":
        net = Sequential([Conv2d(2, 4, 3, rng), ReLU(), Conv2d(4, 3, 3, rng)])
        x = rng.normal(size=(2, 2, 6, 6))
    elif kind == "pool":
        net = Sequential(
            [Conv2d(2, 4, 3, rng), ReLU(), MaxPool2d(), Conv2d(4, 3, 3, rng),
             GlobalAvgPool()]
        )
        x = rng.normal(size=(2, 2, 8, 8))
    elif kind == "residual":
        net = Sequential(
            [Conv2d(2, 4, 3, rng), ReLU(), ResidualBlock(4, rng), MaxPool2d(),
             GlobalAvgPool(), Dense(4, 3, rng)]
        )
        x = rng.normal(size=(2, 2, 8, 8))
    elif kind == "encoder-decoder":
        net = build_micro_unet(
            (2, 8, 8), 3, base_channels=3, depth=2,
            seed=int(rng.integers(0, 2**31)),
        )
        x = rng.normal(size=(2, 2, 8, 8))
    else:
        raise ValueError(f"unknown micro-net kind {kind!r}")
    return net, x


def scalar_loss_closure(net, x: np.ndarray, rng: np.random.Generator):
    """Project the net output onto fixed random weights -> scalar loss."""
    probe = rng.normal(size=net(Tensor(x)).shape)

    def f():
        return reduce_sum(net(Tensor(x)) * Tensor(probe))

    return f
