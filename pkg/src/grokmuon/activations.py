"""Output distributions (softmax, stablemax, sparsemax) and their losses.

Every map works on the last axis, so a single logit vector and a
``[batch, classes]`` matrix are handled by the same code.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, NumericInputError
from .tensor import Tensor, record

VARIANTS = ("softmax", "stablemax", "sparsemax")


def _check(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericInputError("logits contain NaN or Inf")
    return z


def softmax(z) -> np.ndarray:
    z = _check(z)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z) -> np.ndarray:
    z = _check(z)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def stablemax_s(z) -> np.ndarray:
    """Piecewise map: ``z + 1`` for ``z >= 0`` and ``1 / (1 - z)`` below zero."""
    z = np.asarray(z, dtype=np.float64)
    neg = np.minimum(z, 0.0)
    return np.where(z >= 0, z + 1.0, 1.0 / (1.0 - neg))


def log_stablemax_s(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return np.where(z >= 0, np.log1p(np.maximum(z, 0.0)), -np.log1p(-np.minimum(z, 0.0)))


def stablemax(z) -> np.ndarray:
    s = stablemax_s(_check(z))
    return s / s.sum(axis=-1, keepdims=True)


@dataclass
class SparsemaxResult:
    probs: np.ndarray
    tau: np.ndarray | float
    support: np.ndarray  # boolean mask, same shape as probs


def sparsemax_threshold(z: np.ndarray) -> np.ndarray:
    """Threshold tau per row via sort + cumulative sum.

    With ``z`` sorted descending, the support size ``k`` is the largest index
    where ``1 + k * z_(k) > sum_{j<=k} z_(j)`` and ``tau = (cumsum_k - 1) / k``.
    """
    zs = -np.sort(-z, axis=-1, kind="stable")
    cs = np.cumsum(zs, axis=-1)
    ks = np.arange(1, z.shape[-1] + 1, dtype=np.float64)
    cond = 1.0 + ks * zs > cs
    # cond holds on a prefix, so k is its length; k >= 1 always
    k = cond.sum(axis=-1, keepdims=True)
    return (np.take_along_axis(cs, k - 1, axis=-1) - 1.0) / k


def sparsemax(z) -> SparsemaxResult:
    z = _check(z)
    tau = sparsemax_threshold(z)
    probs = np.maximum(z - tau, 0.0)
    tau_out = float(tau[0]) if z.ndim == 1 else tau[..., 0]
    return SparsemaxResult(probs=probs, tau=tau_out, support=probs > 0)


def sparsemax_backward(result: SparsemaxResult, upstream) -> np.ndarray:
    """Jacobian-vector product of sparsemax: center ``upstream`` on the support."""
    g = np.asarray(upstream, dtype=np.float64)
    sup = result.support
    count = sup.sum(axis=-1, keepdims=True)
    if np.any(count == 0):
        raise ContractError("sparsemax support is empty")
    centered = g - (g * sup).sum(axis=-1, keepdims=True) / count
    return np.where(sup, centered, 0.0)


def _losses(z: np.ndarray, targets: np.ndarray, variant: str):
    """Per-row loss and gradient for a ``[batch, classes]`` logit matrix."""
    rows = np.arange(z.shape[0])
    if variant == "softmax":
        logp = log_softmax(z)
        loss = -logp[rows, targets]
        grad = np.exp(logp)
        grad[rows, targets] -= 1.0
    elif variant == "stablemax":
        s = stablemax_s(z)
        total = s.sum(axis=-1)
        zt = z[rows, targets]
        loss = np.log(total) - log_stablemax_s(zt)
        ds = np.where(z >= 0, 1.0, (1.0 / (1.0 - np.minimum(z, 0.0))) ** 2)
        grad = ds / total[:, None]
        grad[rows, targets] -= np.where(zt >= 0, 1.0 / (1.0 + np.maximum(zt, 0.0)),
                                        1.0 / (1.0 - np.minimum(zt, 0.0)))
    elif variant == "sparsemax":
        tau = sparsemax_threshold(z)
        p = np.maximum(z - tau, 0.0)
        sup = p > 0
        quad = np.where(sup, z * z - tau * tau, 0.0).sum(axis=-1)
        loss = -z[rows, targets] + 0.5 * quad + 0.5
        grad = p
        grad[rows, targets] -= 1.0
    else:
        raise ConfigError(f"unknown softmax variant {variant!r}; expected one of {VARIANTS}")
    return loss, grad


def variant_loss(logits, target: int, variant: str = "softmax"):
    """Loss and gradient w.r.t. ``logits`` for one example."""
    z = _check(logits)
    if not 0 <= int(target) < z.shape[-1]:
        raise IndexError(f"target {target} out of range for {z.shape[-1]} classes")
    loss, grad = _losses(z[None, :], np.array([int(target)]), variant)
    return float(loss[0]), grad[0]


def batch_variant_loss(logits, targets, variant: str = "softmax"):
    """Mean loss over rows, and its gradient w.r.t. ``logits``."""
    z = _check(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size and (targets.min() < 0 or targets.max() >= z.shape[-1]):
        raise IndexError(f"target out of range for {z.shape[-1]} classes")
    loss, grad = _losses(z, targets, variant)
    return float(loss.mean()), grad / z.shape[0]


def loss_op(logits: Tensor, targets, variant: str = "softmax") -> Tensor:
    """Differentiable mean loss over a batch of logits."""
    loss, grad = batch_variant_loss(logits.data, targets, variant)
    return record((logits,), np.array(loss), lambda g: (g * grad,))
