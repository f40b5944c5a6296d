"""Adam with decoupled weight decay, global-norm clipping and a warmup/decay schedule."""

from __future__ import annotations

import math

import numpy as np


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float):
    """Scale all gradients together so their joint L2 norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if max_norm is None or max_norm <= 0 or norm <= max_norm:
        return grads, norm
    scale = max_norm / (norm + 1e-6)
    return {k: (g * scale).astype(g.dtype) for k, g in grads.items()}, norm


def linear_schedule(step: int, total_steps: int, warmup_fraction: float) -> float:
    """Learning-rate multiplier: linear ramp over the warmup steps, then linear decay to 0.

    ``step`` is 0-based; the first step already uses a non-zero rate.
    """
    warmup = int(math.ceil(warmup_fraction * total_steps))
    if step < warmup:
        return (step + 1) / warmup
    remaining = total_steps - warmup
    if remaining <= 0:
        return 1.0
    return max(0.0, (total_steps - step) / remaining)


class AdamW:
    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float | None = None):
        """In-place update of ``params[k]`` for every ``k`` in ``grads``."""
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k in sorted(grads):
            g = grads[k]
            p = params[k]
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p *= 1.0 - lr * self.weight_decay
            denom = np.sqrt(v / bc2) + self.eps
            p -= (lr / bc1) * m / denom
