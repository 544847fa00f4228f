"""Plain gradient descent and adaptive-moment optimizers."""

from __future__ import annotations

import numpy as np

from ..errors import NumericsError
from .tensor import Parameter


class SGD:
    """value <- value - lr * gradient."""

    kind = "sgd"

    def __init__(self, params: list[Parameter], lr: float):
        self.params = list(params)
        self.lr = float(lr)
        self.step_count = 0

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.step_count += 1
        for p in self.params:
            p.data -= self.lr * p.grad
            if not np.isfinite(p.data).all():
                raise NumericsError(f"non-finite values in parameter after sgd step")


class Adam:
    """First/second-moment update with bias correction.

    Constants follow the universally assumed defaults: beta1=0.9,
    beta2=0.999, eps=1e-8. Moment buffers are keyed by parameter identity.
    """

    kind = "adam"

    def __init__(
        self,
        params: list[Parameter],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = {id(p): np.zeros_like(p.data) for p in self.params}
        self._v = {id(p): np.zeros_like(p.data) for p in self.params}

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for p in self.params:
            m = self._m[id(p)]
            v = self._v[id(p)]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad**2
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if not np.isfinite(p.data).all():
                raise NumericsError("non-finite values in parameter after adam step")


def make_optimizer(kind: str, params: list[Parameter], lr: float):
    if kind == "sgd":
        return SGD(params, lr)
    if kind == "adam":
        return Adam(params, lr)
    raise ValueError(f"unknown optimizer kind: {kind!r}")
