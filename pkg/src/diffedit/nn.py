"""Small dense-network helpers shared by the first stage and the toy-world models."""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .numerics import ops
from .numerics.optim import AdamW
from .numerics.rng import RngStream
from .numerics.tensor import Tensor, as_tensor

ACTIVATIONS = {"silu": ops.silu, "tanh": ops.tanh, "relu": ops.relu, "sigmoid": ops.sigmoid}


def mlp_init(sizes, rng: RngStream, prefix: str, zero_last: bool = False) -> dict[str, np.ndarray]:
    w = {}
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        if last and zero_last:
            w[f"{prefix}{i}.w"] = np.zeros((n_in, n_out))
        else:
            w[f"{prefix}{i}.w"] = rng.gaussian((n_in, n_out)) / np.sqrt(n_in)
        w[f"{prefix}{i}.b"] = np.zeros(n_out)
    return w


def mlp_forward(weights: Mapping, prefix: str, n_layers: int, x, act: str = "silu",
                out_act: str | None = None, return_hidden: bool = False):
    """Dense stack ``prefix0 .. prefix{n_layers-1}``; hidden layers use ``act``."""
    h = as_tensor(x)
    f = ACTIVATIONS[act]
    hidden = h
    for i in range(n_layers):
        h = h @ as_tensor(weights[f"{prefix}{i}.w"]) + weights[f"{prefix}{i}.b"]
        if i < n_layers - 1:
            h = f(h)
            hidden = h
    if out_act is not None:
        h = ACTIVATIONS[out_act](h)
    return (h, hidden) if return_hidden else h


def traced(weights: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: ops.parameter(v, name=k) for k, v in weights.items()}


def fit_minibatch(weights: dict[str, np.ndarray], loss_fn: Callable, arrays: tuple[np.ndarray, ...],
                  epochs: int, batch_size: int, learning_rate: float, rng: RngStream,
                  weight_decay: float = 0.0, on_epoch: Callable | None = None) -> list[float]:
    """Minimise ``loss_fn(traced_weights, *batch)`` with AdamW; returns per-epoch mean loss."""
    opt = AdamW(learning_rate, weight_decay=weight_decay)
    n = arrays[0].shape[0]
    steps = max(1, n // batch_size)
    total = steps * epochs
    history = []
    k = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for s in range(steps):
            idx = order[s * batch_size:(s + 1) * batch_size]
            tw = traced(weights)
            loss = loss_fn(tw, *(a[idx] for a in arrays))
            value = float(loss.data)
            if not np.isfinite(value):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            opt.learning_rate = learning_rate * 0.5 * (1 + np.cos(np.pi * k / total))
            opt.step(weights, ops.backward(loss, tw))
            losses.append(value)
            k += 1
        history.append(float(np.mean(losses)))
        if on_epoch is not None:
            on_epoch(epoch, history[-1])
    return history
