"""First-order optimizers over a dict of named float64 arrays."""
from __future__ import annotations

import numpy as np


class SGD:
    def __init__(self, learning_rate: float = 1e-2):
        self.learning_rate = learning_rate

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            params[name] -= self.learning_rate * g


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, learning_rate: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, clip_norm: float | None = None):
        self.learning_rate = learning_rate
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        scale = 1.0
        if self.clip_norm is not None:
            total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if total > self.clip_norm:
                scale = self.clip_norm / total
        b1, b2 = self.beta1, self.beta2
        lr_t = self.learning_rate * np.sqrt(1 - b2 ** self.t) / (1 - b1 ** self.t)
        for name, g in grads.items():
            g = g * scale
            m = self._m.get(name)
            if m is None:
                m = self._m[name] = np.zeros_like(g)
                self._v[name] = np.zeros_like(g)
            v = self._v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p = params[name]
            if self.weight_decay:
                p -= self.learning_rate * self.weight_decay * p
            p -= lr_t * m / (np.sqrt(v) + self.eps)


def make_optimizer(kind: str, learning_rate: float, weight_decay: float = 0.0, **kw):
    if kind in ("adaptive-moment", "adamw", "adam"):
        return AdamW(learning_rate, weight_decay=weight_decay, **kw)
    if kind in ("plain-sgd", "sgd"):
        return SGD(learning_rate)
    raise ValueError(f"unknown optimizer {kind!r}")
