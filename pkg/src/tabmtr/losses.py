"""Task losses and the NT-Xent contrastive loss."""

from __future__ import annotations

import numpy as np

from . import tensor as tn
from .tensor import Tensor

TASKS = ("binary", "multiclass", "regression")


def binary_cross_entropy(logits, y) -> Tensor:
    """Sigmoid cross-entropy on a single logit; ``y`` may be soft targets."""
    z = tn.as_tensor(logits).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    return (tn.softplus(z) - z * y).mean()


def softmax_cross_entropy(logits, y) -> Tensor:
    logits = tn.as_tensor(logits)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    logp = tn.log_softmax(logits, axis=-1)
    return -(logp[np.arange(len(y)), y].mean())


def mean_squared_error(pred, y) -> Tensor:
    diff = tn.as_tensor(pred).reshape(-1) - np.asarray(y, dtype=np.float64).reshape(-1)
    return (diff * diff).mean()


def task_loss(logits, y, task: str) -> Tensor:
    if task == "binary":
        return binary_cross_entropy(logits, y)
    if task == "multiclass":
        return softmax_cross_entropy(logits, y)
    if task == "regression":
        return mean_squared_error(logits, y)
    raise ValueError(f"unknown task {task!r}")


def nt_xent_loss(z, z_hat, tau: float = 1.0) -> Tensor:
    """Normalized-temperature cross-entropy over the 2B views ``[z; z_hat]``.

    Row i of ``z`` and row i of ``z_hat`` form a positive pair; every other
    view in the batch is a negative. The loss is averaged over all 2B anchors.
    """
    z, z_hat = tn.as_tensor(z), tn.as_tensor(z_hat)
    if z.shape != z_hat.shape or z.ndim != 2:
        raise tn.ShapeError(f"views must be matching (B, h) matrices, got {z.shape} and {z_hat.shape}")
    b = z.shape[0]
    if b < 2:
        raise ValueError("NT-Xent needs a batch of at least 2")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    views = tn.concat([z, z_hat], axis=0)
    norms = tn.sqrt((views * views).sum(axis=1, keepdims=True))
    if np.any(norms.data == 0):
        raise ValueError("NT-Xent: zero-norm embedding")
    unit = views / norms
    sim = (unit @ unit.T) * (1.0 / tau)
    # exclude self-similarity from the denominator
    sim = sim + np.eye(2 * b) * -1e30
    logp = tn.log_softmax(sim, axis=1)
    positives = np.concatenate([np.arange(b, 2 * b), np.arange(b)])
    return -(logp[np.arange(2 * b), positives].mean())
