"""Loss functions.

All losses return a scalar :class:`Tensor`. Focal variants follow
``-alpha_t * (1 - p_t) ** gamma * log(p_t)``.
"""
from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor

LOG_EPS = 1e-7


def l1(pred: Tensor, target) -> Tensor:
    """Mean absolute difference."""
    return ag.mean(ag.tabs(pred - ag.as_tensor(target)))


def _picked_log_prob(logits: Tensor, target: np.ndarray) -> Tensor:
    target = np.asarray(target, dtype=np.int64)
    if target.shape != (logits.shape[0],):
        raise ag.ShapeError(f"expected {logits.shape[0]} class indices, got shape {target.shape}")
    if target.size and (target.min() < 0 or target.max() >= logits.shape[1]):
        raise ValueError("class index out of range")
    logp = ag.log_softmax_rows(logits)
    return ag.take(logp, (np.arange(len(target)), target))


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean negative log-likelihood of integer targets under softmax(logits)."""
    return -ag.mean(_picked_log_prob(logits, target))


def focal_cross_entropy(logits: Tensor, target, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    logp = _picked_log_prob(logits, target)
    logp = ag.clip(logp, np.log(LOG_EPS), 0.0)
    pt = ag.exp(logp)
    return -ag.mean(alpha * (1.0 - pt) ** gamma * logp)


def binary_cross_entropy(prob: Tensor, target) -> Tensor:
    """Per-class BCE on probabilities, averaged over all entries."""
    y = np.asarray(target, dtype=np.float64)
    if y.shape != prob.shape:
        raise ag.ShapeError(f"target shape {y.shape} does not match {prob.shape}")
    p = ag.clip(prob, LOG_EPS, 1.0 - LOG_EPS)
    return -ag.mean(y * ag.log(p, LOG_EPS) + (1.0 - y) * ag.log(1.0 - p, LOG_EPS))


def focal_binary_cross_entropy(prob: Tensor, target, alpha: float = 0.25,
                               gamma: float = 2.0) -> Tensor:
    y = np.asarray(target, dtype=np.float64)
    if y.shape != prob.shape:
        raise ag.ShapeError(f"target shape {y.shape} does not match {prob.shape}")
    p = ag.clip(prob, LOG_EPS, 1.0 - LOG_EPS)
    pt = y * p + (1.0 - y) * (1.0 - p)
    alpha_t = y * alpha + (1.0 - y) * (1.0 - alpha)
    return -ag.mean(alpha_t * (1.0 - pt) ** gamma * ag.log(pt, LOG_EPS))


def focal_term(pt: float, alpha_t: float, gamma: float) -> float:
    return -alpha_t * (1.0 - pt) ** gamma * np.log(max(pt, LOG_EPS))


def loss(kind: str, prediction: Tensor, target, **kw) -> Tensor:
    fn = {
        "l1": l1,
        "cross_entropy": cross_entropy,
        "binary_cross_entropy": binary_cross_entropy,
        "focal_cross_entropy": focal_cross_entropy,
        "focal_binary_cross_entropy": focal_binary_cross_entropy,
    }.get(kind)
    if fn is None:
        raise ValueError(f"unknown loss kind {kind!r}")
    return fn(prediction, target, **kw)
