"""Soft-label encodings for QP-valued targets and the matching loss.

A ground-truth QP in {0..n-1} is expanded into a distribution over all n
classes.  The Gaussian encoding places a discretized, renormalized bell
around the target so that near-misses are penalized less than distant ones;
the smooth encoding keeps probability eps on the target and spreads the
rest uniformly.

Each constructor takes a scalar target (returning one [n] vector) or a 1-D
array of targets (returning [B, n] rows).
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .tensor import Tensor, log_softmax, mean, mul, tensor_sum

N_QP = 64

DEFAULT_SIGMA = 3.0


def _as_batch(mu, n: int, integral: bool) -> tuple[np.ndarray, bool]:
    arr = np.asarray(mu)
    scalar = arr.ndim == 0
    arr = np.atleast_1d(arr)
    if arr.ndim != 1:
        raise ContractError(f"targets must be scalar or 1-D, got shape {arr.shape}")
    if integral and not np.issubdtype(arr.dtype, np.integer):
        if not np.all(arr == np.floor(arr)):
            raise ContractError("targets must be integers")
        arr = arr.astype(np.int64)
    if np.any((arr < 0) | (arr > n - 1)):
        raise ContractError(f"targets must lie in [0, {n - 1}]")
    return arr, scalar


def one_hot(mu, n: int = N_QP) -> np.ndarray:
    """probs[mu] = 1, all other classes 0."""
    labels, scalar = _as_batch(mu, n, integral=True)
    out = np.zeros((labels.size, n), dtype=np.float64)
    out[np.arange(labels.size), labels] = 1.0
    return out[0] if scalar else out


def smooth_labels(mu, n: int = N_QP, eps: float = 0.9) -> np.ndarray:
    """probs[mu] = eps, every other class (1 - eps)/(n - 1)."""
    if not 0.0 < eps < 1.0:
        raise ContractError(f"eps must be in (0, 1), got {eps}")
    if n < 2:
        raise ContractError("smooth labels need at least 2 classes")
    labels, scalar = _as_batch(mu, n, integral=True)
    out = np.full((labels.size, n), (1.0 - eps) / (n - 1), dtype=np.float64)
    out[np.arange(labels.size), labels] = eps
    return out[0] if scalar else out


def gaussian_soft_labels(mu, sigma: float = DEFAULT_SIGMA, n: int = N_QP) -> np.ndarray:
    """Discretized Gaussian distribution over classes, centered per target.

    Row x is exp(-(x - mu)^2 / (2 sigma^2)) renormalized over the n-point
    support, so each row sums to 1 and peaks exactly at mu.
    """
    if sigma <= 0:
        raise ContractError(f"sigma must be > 0, got {sigma}")
    labels, scalar = _as_batch(mu, n, integral=False)
    labels = labels.astype(np.float64)
    support = np.arange(n, dtype=np.float64)
    logits = -((support[None, :] - labels[:, None]) ** 2) / (2.0 * sigma * sigma)
    logits -= logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    probs = weights / weights.sum(axis=1, keepdims=True)
    return probs[0] if scalar else probs


def make_labels(mu, kind: str = "gdsl", sigma: float = DEFAULT_SIGMA,
                eps: float = 0.9, n: int = N_QP) -> np.ndarray:
    """Dispatch on label kind: one_hot, smooth, or gdsl."""
    if kind == "one_hot":
        return one_hot(mu, n)
    if kind == "smooth":
        return smooth_labels(mu, n, eps)
    if kind == "gdsl":
        return gaussian_soft_labels(mu, sigma, n)
    raise ContractError(f"unknown label kind {kind!r}")


def soft_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over the batch of -sum_x targets[x] * log softmax(logits)[x].

    ``targets`` rows must be probability vectors.  The resulting gradient on
    the logits is (softmax(logits) - targets) / batch.
    """
    targets = np.asarray(targets, dtype=logits.data.dtype)
    if logits.shape != targets.shape:
        raise ContractError(
            f"logits shape {logits.shape} != targets shape {targets.shape}"
        )
    if np.any(targets < 0) or not np.allclose(targets.sum(axis=-1), 1.0, atol=1e-4):
        raise ContractError("target rows must be probability distributions")
    logp = log_softmax(logits)
    per_example = tensor_sum(mul(logp, Tensor(targets)), axis=-1)
    return mul(mean(per_example), -1.0)
