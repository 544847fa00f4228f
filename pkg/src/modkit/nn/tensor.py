"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Tensor`` wraps a numpy array and remembers how it was computed; calling
``backward()`` on a scalar walks the graph in reverse topological order and
accumulates gradients additively into every node (``zero_grad`` resets them).
Everything is double precision: the finite-difference acceptance bound for
gradients assumes it.
"""

from __future__ import annotations

import contextlib

import numpy as np

from ..errors import ContractError, ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """Node in the computation graph. ``data`` is always float64."""

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents=(), backward=None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self._parents: tuple = parents
        self._backward = backward

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def requires_grad(self) -> bool:
        return self._backward is not None or isinstance(self, Parameter)

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    # -- gradient plumbing --------------------------------------------------

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def backward(self):
        """Backpropagate from this scalar through the recorded graph."""
        if self.size != 1:
            raise ContractError(
                f"backward() requires a scalar loss, got shape {self.shape}"
            )
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("tensor/tensor division is not supported")
        return mul(self, 1.0 / float(other))

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if len(axes) > 1 else axes[0])


class Parameter(Tensor):
    """Trainable leaf tensor with a unique identifier and a live gradient."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.shape})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(_as_array(x))


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, parents=parents, backward=backward)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise and linear ops ----------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return _make(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), backward)


def power(a, p) -> Tensor:
    a = _wrap(a)
    p = float(p)
    out = a.data**p

    def backward(g):
        a._accumulate(g * p * a.data ** (p - 1.0))

    return _make(out, (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    return _make(out, (a, b), backward)


def relu(a) -> Tensor:
    a = _wrap(a)
    out = np.maximum(a.data, 0.0)

    def backward(g):
        a._accumulate(g * (a.data > 0.0))

    return _make(out, (a,), backward)


def reduce_sum(a, axis=None) -> Tensor:
    a = _wrap(a)
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy())
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return _make(out, (a,), backward)


def reduce_mean(a, axis=None) -> Tensor:
    a = _wrap(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in axes]))
    return mul(reduce_sum(a, axis), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    out = a.data.reshape(shape)
    old = a.shape

    def backward(g):
        a._accumulate(g.reshape(old))

    return _make(out, (a,), backward)


def transpose(a, axes) -> Tensor:
    a = _wrap(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def backward(g):
        a._accumulate(g.transpose(inv))

    return _make(out, (a,), backward)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, cuts, axis=axis)):
            t._accumulate(piece)

    return _make(out, tuple(tensors), backward)


# -- softmax -------------------------------------------------------------------


def softmax(logits, axis: int = -1):
    """Numerically stable softmax along ``axis``; max-shifted before exp.

    Accepts a plain array (returns an array) or a Tensor (differentiable).
    """
    if not isinstance(logits, Tensor):
        return _softmax_array(_as_array(logits), axis)
    a = logits
    out = _softmax_array(a.data, axis)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        a._accumulate(out * (g - dot))

    return _make(out, (a,), backward)


def _softmax_array(z: np.ndarray, axis: int) -> np.ndarray:
    if z.ndim == 0 or not (-z.ndim <= axis < z.ndim):
        raise ShapeError(f"softmax axis {axis} invalid for shape {z.shape}")
    m = z.max(axis=axis, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=axis, keepdims=True)


# -- spatial ops (NCHW) --------------------------------------------------------


def conv2d(x, w, b=None, stride: int = 1, pad: int | None = None) -> Tensor:
    """2-D cross-correlation of an NCHW batch with an FCkk kernel.

    ``pad=None`` means 'same' padding (k // 2). An im2col buffer in
    channels-first order (n, c*k*k, ho*wo) is filled with k*k contiguous
    block copies so the convolution is one stacked matmul; the input
    gradient is rebuilt by the mirrored col2im scatter.
    """
    x, w = _wrap(x), _wrap(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input/kernel, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    f, cw, k, k2 = w.shape
    if k != k2 or cw != c:
        raise ShapeError(f"kernel {w.shape} incompatible with input {x.shape}")
    p = k // 2 if pad is None else pad
    ho = (h + 2 * p - k) // stride + 1
    wo = (wd + 2 * p - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output collapsed for input {x.shape}, k={k}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    w2 = w.data.reshape(f, c * k * k)
    if k == 1 and stride == 1:
        cols = xp.reshape(n, c, ho * wo)
    else:
        cols6 = np.empty((n, c, k, k, ho, wo))
        for i in range(k):
            for j in range(k):
                cols6[:, :, i, j] = xp[
                    :, :, i : i + stride * ho : stride, j : j + stride * wo : stride
                ]
        cols = cols6.reshape(n, c * k * k, ho * wo)
    out = np.matmul(w2[None], cols).reshape(n, f, ho, wo)
    if b is not None:
        b = _wrap(b)
        out += b.data.reshape(1, f, 1, 1)

    def backward(g):
        gr = g.reshape(n, f, ho * wo)
        gw2 = np.matmul(gr, cols.transpose(0, 2, 1)).sum(axis=0)
        w._accumulate(gw2.reshape(w.shape))
        if b is not None:
            b._accumulate(gr.sum(axis=(0, 2)))
        gcols = np.matmul(w2.T[None], gr)  # (n, c*k*k, ho*wo)
        if k == 1 and stride == 1 and p == 0:
            x._accumulate(gcols.reshape(n, c, h, wd))
            return
        gcols = gcols.reshape(n, c, k, k, ho, wo)
        gxp = np.zeros((n, c, h + 2 * p, wd + 2 * p))
        for i in range(k):
            for j in range(k):
                gxp[
                    :, :, i : i + stride * ho : stride, j : j + stride * wo : stride
                ] += gcols[:, :, i, j]
        x._accumulate(gxp[:, :, p : p + h, p : p + wd] if p else gxp)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward)


def maxpool2d(x) -> Tensor:
    """2x2 max pooling with stride 2; ties resolve to the first window slot."""
    x = _wrap(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d needs even spatial dims, got {x.shape}")
    xr = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    xr = np.ascontiguousarray(xr).reshape(n, c, h // 2, w // 2, 4)
    idx = xr.argmax(axis=-1)
    out = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gr = np.zeros_like(xr)
        np.put_along_axis(gr, idx[..., None], g[..., None], axis=-1)
        gx = gr.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        x._accumulate(gx.reshape(n, c, h, w))

    return _make(out, (x,), backward)


def upsample2_nearest(x) -> Tensor:
    """Nearest-neighbor 2x spatial upsampling of an NCHW batch."""
    x = _wrap(x)
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        x._accumulate(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _make(out, (x,), backward)
