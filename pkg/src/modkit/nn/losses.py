"""Classification/segmentation losses and the labeled/pseudo risk mix."""

from __future__ import annotations

import numpy as np

from ..errors import ContractError, DegenerateInputError, ShapeError
from .tensor import Tensor, _make, _wrap


def _check_targets(targets: np.ndarray, num_classes: int, ignore_index):
    bad = (targets < 0) | (targets >= num_classes)
    if ignore_index is not None:
        bad &= targets != ignore_index
    if bad.any():
        raise ContractError(
            f"target labels outside [0, {num_classes}) "
            f"(ignore_index={ignore_index}): {np.unique(targets[bad])}"
        )


def _log_softmax_last(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def cross_entropy(logits, targets, ignore_index: int | None = None) -> Tensor:
    """Mean negative log-likelihood over non-ignored positions.

    ``logits`` has the class axis last; ``targets`` holds integer class
    indices with the remaining shape. Ignored positions contribute zero
    and are excluded from the normalizer.
    """
    logits = _wrap(logits)
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(
            f"logits {logits.shape} do not align with targets {targets.shape}"
        )
    k = logits.shape[-1]
    _check_targets(targets, k, ignore_index)
    valid = np.ones(targets.shape, dtype=bool)
    if ignore_index is not None:
        valid = targets != ignore_index
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise DegenerateInputError("every target position is ignored")
    safe_t = np.where(valid, targets, 0)
    logp = _log_softmax_last(logits.data)
    nll = -np.take_along_axis(logp, safe_t[..., None], axis=-1)[..., 0]
    loss = float((nll * valid).sum() / n_valid)

    def backward(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe_t[..., None], 1.0, axis=-1)
        glog = (p - onehot) * valid[..., None] * (float(g) / n_valid)
        logits._accumulate(glog)

    return _make(np.asarray(loss), (logits,), backward)


def cross_entropy_per_sample(
    logits, targets, ignore_index: int | None = None
) -> Tensor:
    """Per-sample mean NLL: shape (N,); fully-ignored samples yield 0.

    Used by the self-training loop, which weights labeled and pseudo-labeled
    sample losses differently before reducing.
    """
    logits = _wrap(logits)
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape or targets.ndim < 1:
        raise ShapeError(
            f"logits {logits.shape} do not align with targets {targets.shape}"
        )
    k = logits.shape[-1]
    _check_targets(targets, k, ignore_index)
    valid = np.ones(targets.shape, dtype=bool)
    if ignore_index is not None:
        valid = targets != ignore_index
    axes = tuple(range(1, targets.ndim))
    counts = valid.sum(axis=axes) if axes else valid.astype(np.int64)
    if counts.sum() == 0:
        raise DegenerateInputError("every target position is ignored")
    safe_t = np.where(valid, targets, 0)
    logp = _log_softmax_last(logits.data)
    nll = -np.take_along_axis(logp, safe_t[..., None], axis=-1)[..., 0]
    denom = np.maximum(counts, 1).astype(np.float64)
    per = (nll * valid).sum(axis=axes) / denom if axes else nll * valid

    def backward(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe_t[..., None], 1.0, axis=-1)
        scale = (g / denom).reshape((-1,) + (1,) * (logits.ndim - 1))
        logits._accumulate((p - onehot) * valid[..., None] * scale)

    return _make(per, (logits,), backward)


def squared_error(pred, target) -> Tensor:
    """Half mean squared error between a prediction batch and targets."""
    pred = _wrap(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"squared_error shapes differ: {pred.shape} vs {target.shape}")
    diff = pred - Tensor(target)
    return (diff * diff).sum() * (0.5 / pred.shape[0])


def composite_risk(labeled_loss, pseudo_loss, lam: float):
    """Convex mix of the labeled-set and pseudo-labeled-set losses.

    Returns ``lam * labeled_loss + (1 - lam) * pseudo_loss``; accepts
    tensors (differentiable) or plain floats.
    """
    lam = float(lam)
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"mixing weight must be in [0, 1], got {lam}")
    if isinstance(labeled_loss, Tensor) or isinstance(pseudo_loss, Tensor):
        return _wrap(labeled_loss) * lam + _wrap(pseudo_loss) * (1.0 - lam)
    return lam * float(labeled_loss) + (1.0 - lam) * float(pseudo_loss)
