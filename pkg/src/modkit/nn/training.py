"""Deterministic mini-batch training loop."""

from __future__ import annotations

import numpy as np

from ..errors import DegenerateInputError, NumericsError
from ..seeding import rng_for
from . import tensor as T
from .losses import composite_risk, cross_entropy, cross_entropy_per_sample
from .tensor import Tensor


def _class_axis_last(logits: Tensor, targets: np.ndarray) -> Tensor:
    # Segmentation nets emit (N, K, H, W); the losses want classes last.
    if logits.ndim == 4 and targets.ndim == 3:
        return logits.transpose(0, 2, 3, 1)
    return logits


def train(
    net,
    images: np.ndarray,
    targets: np.ndarray,
    *,
    optimizer,
    epochs: int,
    batch_size: int = 32,
    seed: int = 0,
    ignore_index: int | None = None,
    pseudo_flags: np.ndarray | None = None,
    lam: float = 0.5,
) -> list[float]:
    """Train ``net`` in place; returns the per-epoch mean loss history.

    Batch order is reshuffled each epoch from a seed derived from
    (seed, epoch), so identical (seed, config) runs produce identical
    parameters. When ``pseudo_flags`` marks pseudo-labeled samples, each
    batch loss mixes the labeled and pseudo parts with weights lam and
    1 - lam; a batch holding only one kind falls back to its plain mean.
    """
    n = len(images)
    if n == 0:
        raise DegenerateInputError("training dataset is empty")
    if len(targets) != n:
        raise DegenerateInputError("images and targets differ in length")
    history: list[float] = []
    for epoch in range(epochs):
        order = rng_for(seed, "shuffle", epoch).permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            logits = _class_axis_last(net(Tensor(images[idx])), targets[idx])
            if pseudo_flags is None:
                loss = cross_entropy(logits, targets[idx], ignore_index)
            else:
                loss = _mixed_batch_loss(
                    logits, targets[idx], pseudo_flags[idx], lam, ignore_index
                )
            if not np.isfinite(loss.data):
                raise NumericsError(f"non-finite loss at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
    return history


def _mixed_batch_loss(logits, batch_targets, batch_pseudo, lam, ignore_index):
    per = cross_entropy_per_sample(logits, batch_targets, ignore_index)
    n_pse = int(batch_pseudo.sum())
    n_lab = len(batch_pseudo) - n_pse
    if n_lab == 0 or n_pse == 0:
        return per.mean()
    lab_mean = (per * (~batch_pseudo).astype(float)).sum() / n_lab
    pse_mean = (per * batch_pseudo.astype(float)).sum() / n_pse
    return composite_risk(lab_mean, pse_mean, lam)
