"""Conditional noise-prediction network and its training loop.

The network is a residual MLP over flattened latents. Time enters through
sinusoidal features and a small projection; the class label through a
learnable embedding table whose last row is the null label used for
classifier-free guidance.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .numerics import ops
from .numerics.optim import make_optimizer
from .numerics.rng import RngStream
from .numerics.tensor import Tensor, as_tensor
from .schedule import NoiseSchedule, linear_schedule

log = logging.getLogger(__name__)

NULL_LABEL = -1


class LabelError(ValueError):
    pass


class NumericError(RuntimeError):
    """Training produced a non-finite value; ``diagnostics`` says where."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class TrainConfig:
    p_uncond: float = 0.2
    learning_rate: float = 1e-3
    batch_size: int = 128
    epochs: int = 100
    optimizer: str = "adaptive-moment"
    weight_decay: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.p_uncond <= 1.0:
            raise ValueError(f"p_uncond must lie in [0, 1], got {self.p_uncond}")
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.epochs <= 0:
            raise ValueError("learning_rate, batch_size and epochs must be positive")


@dataclass
class DenoiserParams:
    """Weights of ε_θ plus the architecture needed to interpret them."""

    data_shape: tuple[int, ...]
    num_classes: int
    width: int
    depth: int
    d_cls: int = 32
    time_dim: int = 32
    weights: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def dim(self) -> int:
        return int(np.prod(self.data_shape))

    @property
    def null_index(self) -> int:
        return self.num_classes

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.data_shape, self.num_classes, self.width, self.depth,
                              self.d_cls, self.time_dim,
                              {k: v.copy() for k, v in self.weights.items()})

    def arch(self) -> dict:
        return {"data_shape": list(self.data_shape), "num_classes": self.num_classes,
                "width": self.width, "depth": self.depth, "d_cls": self.d_cls,
                "time_dim": self.time_dim}

    def traced(self) -> dict[str, Tensor]:
        """Leaf tensors over the (shared) weight arrays, for differentiation."""
        return {k: ops.parameter(v, name=k) for k, v in self.weights.items()}


def init_params(data_shape, num_classes: int, width: int = 256, depth: int = 3,
                d_cls: int = 32, time_dim: int = 32, seed: int = 0) -> DenoiserParams:
    data_shape = tuple(int(n) for n in np.atleast_1d(data_shape))
    d = int(np.prod(data_shape))
    rng = RngStream(seed, 0x64656E6F)

    def dense(n_in, n_out, scale=1.0):
        return rng.gaussian((n_in, n_out)) * (scale / np.sqrt(n_in))

    w = {
        "in.w": dense(d, width), "in.b": np.zeros(width),
        "time.w1": dense(time_dim, width), "time.b1": np.zeros(width),
        "time.w2": dense(width, width), "time.b2": np.zeros(width),
        "class_embed": rng.gaussian((num_classes + 1, d_cls)),
        "class.w": dense(d_cls, width),
    }
    for k in range(depth):
        w[f"block{k}.w1"] = dense(width, width)
        w[f"block{k}.b1"] = np.zeros(width)
        w[f"block{k}.we"] = dense(width, width)
        w[f"block{k}.w2"] = dense(width, width, scale=0.5 / np.sqrt(depth))
        w[f"block{k}.b2"] = np.zeros(width)
    # zero head: an untrained model predicts ε̂ = 0
    w["out.w"] = np.zeros((width, d))
    w["out.b"] = np.zeros(d)
    return DenoiserParams(data_shape, num_classes, width, depth, d_cls, time_dim, w)


def timestep_features(t, dim: int = 32, base: float = 1e4) -> np.ndarray:
    """Sinusoidal features of integer times, shape ``(len(t), dim)``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(base) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def label_indices(params: DenoiserParams, y, batch: int) -> np.ndarray:
    """Map ``None`` / int / int-array (``-1`` = null) to embedding rows."""
    if y is None:
        idx = np.full(batch, params.null_index, dtype=np.int64)
    else:
        arr = np.asarray(y)
        if arr.dtype.kind not in "iu":
            raise LabelError(f"labels must be integers, got {arr.dtype}")
        arr = np.broadcast_to(arr.astype(np.int64), (batch,)).copy()
        bad = (arr < NULL_LABEL) | (arr >= params.num_classes)
        if np.any(bad):
            raise LabelError(f"label out of range 0..{params.num_classes - 1}: {arr[bad][0]}")
        idx = np.where(arr == NULL_LABEL, params.null_index, arr)
    return idx


def forward(params: DenoiserParams, weights: Mapping, z, t, y) -> Tensor:
    """ε̂ for a batch ``z`` of shape ``(B, d)``; ``weights`` may hold Tensors."""
    z = as_tensor(z)
    B = z.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (B,))
    temb = timestep_features(t, params.time_dim)
    ht = ops.silu(temb @ as_tensor(weights["time.w1"]) + weights["time.b1"])
    ht = ht @ as_tensor(weights["time.w2"]) + weights["time.b2"]
    cls = ops.take_rows(weights["class_embed"], label_indices(params, y, B))
    cond = ops.silu(ht + cls @ as_tensor(weights["class.w"]))
    h = z @ as_tensor(weights["in.w"]) + weights["in.b"]
    for k in range(params.depth):
        pre = h @ as_tensor(weights[f"block{k}.w1"]) + cond @ as_tensor(weights[f"block{k}.we"])
        a = ops.silu(pre + weights[f"block{k}.b1"])
        h = h + a @ as_tensor(weights[f"block{k}.w2"]) + weights[f"block{k}.b2"]
    return ops.silu(h) @ as_tensor(weights["out.w"]) + weights["out.b"]


def _flatten(params: DenoiserParams, z):
    """Reshape a single item or a batch to ``(B, d)``; returns the undo shape."""
    shape = tuple(z.shape)
    ds = params.data_shape
    if shape == ds:
        return ops.reshape(z, (1, params.dim)), shape
    if shape[1:] == ds or (len(ds) == 1 and len(shape) == 2 and shape[1] == ds[0]):
        return ops.reshape(z, (shape[0], params.dim)), shape
    raise ValueError(f"input shape {shape} does not match data shape {ds}")


def predict_eps(params: DenoiserParams, z_t, t, y, weights: Mapping | None = None):
    """ε_θ(z_t, t, y). Returns an ndarray for array input, a Tensor for Tensor input.

    ``y`` is a class index, ``None`` for the null label, or an int array
    (``-1`` marks null entries). Pass traced ``weights`` to differentiate.
    """
    is_tensor = isinstance(z_t, Tensor) or weights is not None
    zt = as_tensor(z_t)
    flat, shape = _flatten(params, zt)
    params_t = params.weights if weights is None else weights
    out = ops.reshape(forward(params, params_t, flat, t, y), shape)
    return out if is_tensor else out.data


def train_step(params: DenoiserParams, batch, schedule: NoiseSchedule, rng: RngStream,
               config: TrainConfig, optimizer=None) -> float:
    """One ε-prediction update; returns the loss before the update."""
    z0, y = batch
    z0 = np.asarray(z0, dtype=np.float64)
    if z0.shape[0] == 0:
        raise ValueError("empty batch")
    y = np.asarray(y, dtype=np.int64)
    B = z0.shape[0]
    z0 = z0.reshape(B, params.dim)
    t = rng.integers(1, schedule.T + 1, size=B)
    eps = rng.gaussian((B, params.dim))
    drop = rng.bernoulli(config.p_uncond, B)
    y = np.where(drop, NULL_LABEL, y)
    ab = schedule.alpha_bar(t)[:, None]
    zt = np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps

    traced = params.traced()
    pred = forward(params, traced, zt, t, y)
    loss = ops.tmean(ops.square(pred - eps))
    value = float(loss.data)
    if not np.isfinite(value):
        raise NumericError("non-finite denoiser loss",
                           {"t": t.tolist(), "labels": y.tolist(),
                            "max_abs_weight": {k: float(np.abs(v).max()) for k, v in params.weights.items()}})
    grads = ops.backward(loss, traced)
    if optimizer is None:
        optimizer = make_optimizer(config.optimizer, config.learning_rate, config.weight_decay)
    optimizer.step(params.weights, grads)
    return value


class ConditionalDenoiser(BaseEstimator):
    """Class-conditional ε-prediction model trained with label dropout.

    ``fit(Z, y)`` takes latents of shape ``(n, *data_shape)`` and integer labels.
    """

    def __init__(self, num_classes=7, width=256, depth=3, d_cls=32, time_dim=32,
                 T=100, beta_start=1e-4, beta_end=0.02, p_uncond=0.2, learning_rate=1e-3,
                 batch_size=128, epochs=100, optimizer="adaptive-moment", weight_decay=0.0,
                 lr_decay=True, random_state=0):
        self.num_classes = num_classes
        self.width = width
        self.depth = depth
        self.d_cls = d_cls
        self.time_dim = time_dim
        self.T = T
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.p_uncond = p_uncond
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.optimizer = optimizer
        self.weight_decay = weight_decay
        self.lr_decay = lr_decay
        self.random_state = random_state

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.p_uncond, self.learning_rate, self.batch_size, self.epochs,
                           self.optimizer, self.weight_decay)

    def fit(self, Z, y):
        Z = np.asarray(Z, dtype=np.float64)
        y = check_array(np.asarray(y).reshape(-1, 1), dtype=np.int64).ravel()
        if Z.shape[0] != y.shape[0] or Z.shape[0] == 0:
            raise ValueError("Z and y must be non-empty with matching lengths")
        if np.any((y < 0) | (y >= self.num_classes)):
            raise LabelError("training labels out of range")
        config = self.train_config()
        self.schedule_ = linear_schedule(self.T, self.beta_start, self.beta_end)
        self.params_ = init_params(Z.shape[1:], self.num_classes, self.width, self.depth,
                                   self.d_cls, self.time_dim, seed=self.random_state)
        opt = make_optimizer(config.optimizer, config.learning_rate, config.weight_decay)
        rng = RngStream(self.random_state, 1)
        n = Z.shape[0]
        steps_per_epoch = max(1, n // config.batch_size)
        total = steps_per_epoch * config.epochs
        self.loss_history_ = []
        step = 0
        for epoch in range(config.epochs):
            order = rng.permutation(n)
            for s in range(steps_per_epoch):
                if self.lr_decay:
                    opt.learning_rate = config.learning_rate * 0.5 * (1 + np.cos(np.pi * step / total))
                idx = order[s * config.batch_size:(s + 1) * config.batch_size]
                loss = train_step(self.params_, (Z[idx], y[idx]), self.schedule_, rng, config, opt)
                self.loss_history_.append(loss)
                step += 1
            log.debug("epoch %d loss %.4f", epoch, np.mean(self.loss_history_[-steps_per_epoch:]))
        return self

    def predict_eps(self, Z, t, y):
        check_is_fitted(self, "params_")
        return predict_eps(self.params_, np.asarray(Z, dtype=np.float64), t, y)
