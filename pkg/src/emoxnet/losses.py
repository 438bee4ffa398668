"""Softmax, categorical cross-entropy and label smoothing.

The numpy functions are the reference definitions; ``soft_cross_entropy``
is the batched torch form used by the training loop.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class SmoothingConfig:
    alpha: float = 0.1
    n_classes: int = 7

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"alpha must lie in [0, 1), got {self.alpha}")
        if self.n_classes < 1:
            raise ValueError("n_classes must be positive")


def stable_softmax(z) -> np.ndarray:
    """Softmax over the last axis with max-subtraction."""
    z = np.asarray(z, dtype=np.float64)
    if not np.isfinite(z).all():
        raise ValueError("softmax input must be finite")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def categorical_cross_entropy(p, y) -> float | np.ndarray:
    """``-sum(y * log(p))`` over the last axis, log clamped at 1e-12."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: probabilities {p.shape} vs targets {y.shape}")
    loss = -(y * np.log(np.maximum(p, PROB_FLOOR))).sum(axis=-1)
    # -0.0 from exact matches
    loss = loss + 0.0
    return float(loss) if loss.ndim == 0 else loss


def smooth_distribution(d, cfg: SmoothingConfig = SmoothingConfig()) -> np.ndarray:
    """``(1 - alpha) * d + alpha / N``; applies to one-hot labels and to
    softmax outputs alike."""
    d = np.asarray(d, dtype=np.float64)
    if d.shape[-1] != cfg.n_classes:
        raise ValueError(f"expected {cfg.n_classes} classes, got {d.shape[-1]}")
    if cfg.alpha == 0.0:
        return d.copy()
    return (1.0 - cfg.alpha) * d + cfg.alpha / cfg.n_classes


def softmax_cce_gradient(z, y) -> np.ndarray:
    """Gradient of ``categorical_cross_entropy(stable_softmax(z), y)`` w.r.t. ``z``
    for a target that sums to one."""
    y = np.asarray(y, dtype=np.float64)
    return stable_softmax(z) - y


def soft_cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of ``-sum(targets * log_softmax(logits))``."""
    return -(targets * torch.log_softmax(logits, dim=1)).sum(dim=1).mean()
