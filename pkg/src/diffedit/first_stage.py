"""Toy first stage: image <-> latent autoencoder with optional vector quantization.

Three modes are supported:

``identity``
    latents are the images themselves; the pipeline then runs in pixel space.
``ae``
    dense encoder/decoder with a ``(H/f, W/f, c)`` latent.
``vq-ae``
    as ``ae``, but every ``c``-dimensional latent vector is snapped to its
    nearest codebook entry before decoding (straight-through gradients).

Latents handed to the diffusion model are standardised per coordinate; the
decoder undoes this before (optionally) quantizing.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .nn import mlp_forward, mlp_init, traced
from .numerics import ops
from .numerics.optim import AdamW
from .numerics.rng import RngStream
from .numerics.tensor import Tensor, as_tensor, stop_gradient, straight_through

log = logging.getLogger(__name__)

MODES = ("identity", "ae", "vq-ae")


class ShapeError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass
class Codebook:
    entries: np.ndarray
    usage: np.ndarray

    def __post_init__(self):
        if self.entries.ndim != 2 or self.entries.shape[0] < 2:
            raise ValueError("codebook needs at least two entries")

    @property
    def K(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]


def nearest_codes(entries: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Index of the nearest entry for each row of ``z`` (ties -> lowest index)."""
    d = (z * z).sum(1, keepdims=True) - 2.0 * z @ entries.T + (entries * entries).sum(1)[None, :]
    return np.argmin(d, axis=1)


def quantize(codebook: Codebook | np.ndarray, z, entries=None):
    """Snap the trailing-axis vectors of ``z`` to their nearest codebook entries.

    Returns ``(z_q, indices, commit_loss)``. ``z_q`` carries straight-through
    gradients to ``z`` and, through ``entries`` if traced, to the codebook.
    ``commit_loss`` is the mean of ``|z - stopgrad(z_q)|^2``.
    """
    table = codebook.entries if isinstance(codebook, Codebook) else np.asarray(codebook)
    zt = as_tensor(z)
    c = table.shape[1]
    if zt.shape[-1] != c:
        raise ShapeError(f"latent channel dim {zt.shape[-1]} != codebook dim {c}")
    flat = ops.reshape(zt, (-1, c))
    idx = nearest_codes(table, flat.data)
    picked = ops.take_rows(entries if entries is not None else table, idx)
    st = straight_through(flat, picked)
    commit = ops.tmean(ops.square(flat - stop_gradient(picked)))
    z_q = ops.reshape(st, zt.shape)
    if entries is not None:
        # codebook loss pulls the picked entries towards the (frozen) encoder output
        commit_code = ops.tmean(ops.square(picked - stop_gradient(flat)))
        return z_q, idx.reshape(zt.shape[:-1]), commit, commit_code
    if not isinstance(z, Tensor):
        return z_q.data, idx.reshape(zt.shape[:-1]), float(commit.data)
    return z_q, idx.reshape(zt.shape[:-1]), commit


class FirstStage(TransformerMixin, BaseEstimator):
    """Encoder/decoder pair; ``transform`` encodes, ``inverse_transform`` decodes."""

    def __init__(self, mode="ae", f=4, c=3, hidden=256, n_codes=64, beta_commit=0.25,
                 epochs=200, batch_size=64, learning_rate=2e-3, divergence_factor=10.0,
                 random_state=0):
        self.mode = mode
        self.f = f
        self.c = c
        self.hidden = hidden
        self.n_codes = n_codes
        self.beta_commit = beta_commit
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.divergence_factor = divergence_factor
        self.random_state = random_state

    # shapes ------------------------------------------------------------------
    def _check_images(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim not in (3, 4):
            raise ShapeError(f"expected a batch of images (n, H, W[, C]), got shape {X.shape}")
        H, W = X.shape[1:3]
        if self.mode != "identity" and (H % self.f or W % self.f):
            raise ShapeError(f"image extents {H}x{W} not divisible by f={self.f}")
        return X

    def latent_shape(self, image_shape) -> tuple[int, ...]:
        if self.mode == "identity":
            return tuple(image_shape)
        H, W = image_shape[:2]
        if H % self.f or W % self.f:
            raise ShapeError(f"image extents {H}x{W} not divisible by f={self.f}")
        return (H // self.f, W // self.f, self.c)

    # fitting -----------------------------------------------------------------
    def fit(self, X, y=None):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.f < 1 or self.f & (self.f - 1):
            raise ValueError(f"downsample factor must be a power of two, got {self.f}")
        X = self._check_images(X)
        if X.shape[0] == 0:
            raise ValueError("empty dataset")
        self.image_shape_ = tuple(X.shape[1:])
        self.latent_shape_ = self.latent_shape(self.image_shape_)
        if self.mode == "identity":
            self.loss_history_ = [0.0]
            self.weights_ = {}
            return self
        self._train(X)
        Z = self._encode_raw(X.reshape(X.shape[0], -1)).data
        self.latent_mean_ = Z.mean(axis=0)
        self.latent_std_ = Z.std(axis=0) + 1e-6
        return self

    def _train(self, X: np.ndarray) -> None:
        rng = RngStream(self.random_state, 0x666972)
        d_in = int(np.prod(self.image_shape_))
        d_lat = int(np.prod(self.latent_shape_))
        w = mlp_init([d_in, self.hidden, d_lat], rng, "enc")
        w.update(mlp_init([d_lat, self.hidden, d_in], rng, "dec"))
        vq = self.mode == "vq-ae"
        if vq:
            w["codebook"] = rng.gaussian((self.n_codes, self.c)) * 0.5
        self.weights_ = w
        flat = X.reshape(X.shape[0], -1)
        opt = AdamW(self.learning_rate)
        n = flat.shape[0]
        steps = max(1, n // self.batch_size)
        total = steps * self.epochs
        self.loss_history_ = []
        self.codebook_usage_ = None
        k = 0
        for epoch in range(self.epochs):
            order = rng.permutation(n)
            losses = []
            usage = np.zeros(self.n_codes, dtype=np.int64)
            for s in range(steps):
                xb = flat[order[s * self.batch_size:(s + 1) * self.batch_size]]
                tw = traced(w)
                z = mlp_forward(tw, "enc", 2, xb, act="silu")
                if vq:
                    zc = ops.reshape(z, (-1, self.c))
                    zq, idx, commit, code = quantize(w["codebook"], zc, entries=tw["codebook"])
                    np.add.at(usage, idx.ravel(), 1)
                    z = ops.reshape(zq, z.shape)
                rec = mlp_forward(tw, "dec", 2, z, act="silu", out_act="sigmoid")
                l1 = ops.tmean(ops.tabs(rec - xb))
                loss = l1 + (code + self.beta_commit * commit if vq else 0.0)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise DivergenceError(f"non-finite first-stage loss at epoch {epoch}")
                opt.learning_rate = self.learning_rate * 0.5 * (1 + np.cos(np.pi * k / total))
                opt.step(w, ops.backward(loss, tw))
                losses.append(float(l1.data))
                k += 1
            self.loss_history_.append(float(np.mean(losses)))
            if self.loss_history_[-1] > self.divergence_factor * self.loss_history_[0]:
                raise DivergenceError(f"first-stage loss diverged at epoch {epoch}: {self.loss_history_[-1]}")
            if vq:
                self.codebook_usage_ = usage
                dead = np.flatnonzero(usage == 0)
                if dead.size and epoch < self.epochs - 1:
                    # re-seed unused entries from random encoder outputs
                    pick = flat[rng.integers(0, n, size=dead.size)]
                    zs = self._encode_raw(pick).data.reshape(dead.size, -1, self.c)
                    w["codebook"][dead] = zs[np.arange(dead.size), rng.integers(0, zs.shape[1], size=dead.size)]
            log.debug("first stage epoch %d l1 %.4f", epoch, self.loss_history_[-1])

    @property
    def codebook_(self) -> Codebook:
        check_is_fitted(self, "weights_")
        if self.mode != "vq-ae":
            raise AttributeError("only vq-ae mode has a codebook")
        usage = self.codebook_usage_ if self.codebook_usage_ is not None else np.zeros(self.n_codes)
        return Codebook(self.weights_["codebook"], usage)

    # encode / decode ---------------------------------------------------------
    def _encode_raw(self, flat, weights=None) -> Tensor:
        return mlp_forward(weights or self.weights_, "enc", 2, flat, act="silu")

    def encode(self, X) -> np.ndarray:
        """Standardised latents of a batch ``(n, H, W)`` (or a single image)."""
        check_is_fitted(self, "image_shape_")
        X = np.asarray(X, dtype=np.float64)
        single = X.shape == self.image_shape_
        if single:
            X = X[None]
        X = self._check_images(X)
        if X.shape[1:] != self.image_shape_:
            raise ShapeError(f"expected images of shape {self.image_shape_}, got {X.shape[1:]}")
        if self.mode == "identity":
            Z = X.copy()
        else:
            Z = self._encode_raw(X.reshape(X.shape[0], -1)).data
            Z = ((Z - self.latent_mean_) / self.latent_std_).reshape((X.shape[0],) + self.latent_shape_)
        return Z[0] if single else Z

    def decode(self, Z):
        """Images from standardised latents; differentiable when ``Z`` is a Tensor."""
        check_is_fitted(self, "image_shape_")
        is_tensor = isinstance(Z, Tensor)
        zt = as_tensor(Z)
        single = tuple(zt.shape) == self.latent_shape_
        if single:
            zt = ops.reshape(zt, (1,) + self.latent_shape_)
        if tuple(zt.shape[1:]) != self.latent_shape_:
            raise ShapeError(f"expected latents of shape {self.latent_shape_}, got {zt.shape[1:]}")
        n = zt.shape[0]
        if self.mode == "identity":
            out = zt
        else:
            raw = ops.reshape(zt, (n, -1)) * self.latent_std_ + self.latent_mean_
            if self.mode == "vq-ae":
                raw = ops.reshape(quantize(self.weights_["codebook"], ops.reshape(raw, (-1, self.c)))[0], (n, -1))
            rec = mlp_forward(self.weights_, "dec", 2, raw, act="silu", out_act="sigmoid")
            out = ops.reshape(rec, (n,) + self.image_shape_)
        if single:
            out = ops.reshape(out, self.image_shape_)
        return out if is_tensor else out.data

    def transform(self, X):
        return self.encode(X)

    def inverse_transform(self, Z):
        return self.decode(Z)

    def quantize_latents(self, Z):
        """Codebook indices for standardised latents (vq-ae only)."""
        Z = np.asarray(Z, dtype=np.float64)
        raw = Z.reshape(Z.shape[0], -1) * self.latent_std_ + self.latent_mean_
        _, idx, _ = quantize(self.codebook_, raw.reshape(-1, self.c))
        return idx.reshape(Z.shape[0], -1)

    def reconstruction_l1(self, X) -> float:
        X = self._check_images(X)
        return float(np.mean(np.abs(self.decode(self.encode(X)) - X)))

    def codebook_usage(self, X) -> float:
        """Fraction of codebook entries hit when encoding ``X``."""
        idx = self.quantize_latents(self.encode(X))
        return np.unique(idx).size / self.n_codes
