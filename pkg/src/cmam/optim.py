"""RMSProp with global-norm gradient clipping."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


def rmsprop_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], accumulators: dict[str, np.ndarray],
                 lr: float, decay: float = 0.9, eps: float = 1e-8):
    """In-place update: acc <- decay*acc + (1-decay) g^2; p <- p - lr g / sqrt(acc + eps)."""
    for name, p in params.items():
        g = grads[name]
        acc = accumulators[name]
        if g.shape != p.shape or acc.shape != p.shape:
            raise ValueError(f"{name}: shapes differ (param {p.shape}, grad {g.shape}, acc {acc.shape})")
        acc *= decay
        acc += (1.0 - decay) * g * g
        p -= lr * g / np.sqrt(acc + eps)
    return params, accumulators


class RMSProp:
    def __init__(self, named: dict[str, Tensor], lr: float = 1e-4, decay: float = 0.9, eps: float = 1e-8,
                 clip_norm: float | None = 10.0):
        self.named = named
        self.lr, self.decay, self.eps, self.clip_norm = lr, decay, eps, clip_norm
        self.accumulators = {k: np.zeros_like(t.data) for k, t in named.items()}
        self.steps = 0

    def step(self) -> float:
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in self.named.items()}
        norm = 0.0
        if self.clip_norm is not None:
            grads, norm = clip_global_norm(grads, self.clip_norm)
        rmsprop_step({k: t.data for k, t in self.named.items()}, grads, self.accumulators,
                     self.lr, self.decay, self.eps)
        self.steps += 1
        return norm
