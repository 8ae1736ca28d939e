"""Embedding-guided finetuning of the denoiser along a target class direction.

The finetuning objective combines a directional loss (image-embedding change
aligned with the class-prototype change), an identity loss and a pixel L2
term. Gradients flow through a short deterministic DDIM chain started from
precomputed inverted latents.
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .denoiser import DenoiserParams, NumericError
from .diffusion import ddim_invert, ddim_step
from .first_stage import FirstStage
from .numerics import ops
from .numerics.optim import AdamW
from .numerics.rng import RngStream
from .numerics.tensor import Tensor, as_tensor
from .schedule import NoiseSchedule, build_step_plan

log = logging.getLogger(__name__)

DEGENERATE_NORM = 1e-12


class StalenessError(RuntimeError):
    """A latent store was built under a different configuration."""


@dataclass
class FinetuneConfig:
    lambda_dir: float = 2.0
    lambda_id: float = 1.0
    lambda_l2: float = 1.0
    T_tune: int = 6
    t0: int = 50
    gamma: float = 1.0
    epochs: int = 20
    learning_rate: float = 2e-4
    batch_size: int = 16
    precompute_count: int = 50
    subsample: int = 100
    grad_depth: int | None = None
    seed: int = 0

    def __post_init__(self):
        if min(self.lambda_dir, self.lambda_id, self.lambda_l2) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.T_tune < 2:
            raise ValueError(f"T_tune must be at least 2, got {self.T_tune}")


class EmbedderOracle:
    """Image and class embeddings for the directional loss, backed by the emotion oracle."""

    def __init__(self, oracle):
        self.oracle = oracle

    def image_embed(self, x) -> Tensor:
        return self.oracle.embed_tensor(x)

    def class_embed(self, label: int) -> np.ndarray:
        return self.oracle.class_embed(label)


def _batch(x) -> Tensor:
    x = as_tensor(x)
    return ops.reshape(x, (1,) + x.shape) if x.ndim == 2 else x


def directional_loss(oracle: EmbedderOracle, x_gen, x_src, y_trg, y_src):
    """Mean of ``1 − cos(E(x_gen) − E(x_src), P(y_trg) − P(y_src))`` over a batch.

    Items whose image or class direction is degenerate contribute the constant
    fallback 1 and are flagged. Returns ``(loss, flags)``; ``loss`` is a Tensor
    when ``x_gen`` is one, a float otherwise.
    """
    traced = isinstance(x_gen, Tensor)
    xg, xs = _batch(x_gen), _batch(np.asarray(x_src.data if isinstance(x_src, Tensor) else x_src))
    n = xg.shape[0]
    y_trg = np.broadcast_to(np.asarray(y_trg), (n,))
    y_src = np.broadcast_to(np.asarray(y_src), (n,))
    img_dir = oracle.image_embed(xg) - oracle.image_embed(xs).data
    txt_dir = np.stack([oracle.class_embed(a) - oracle.class_embed(b) for a, b in zip(y_trg, y_src)])
    img_norm = np.linalg.norm(img_dir.data, axis=1)
    txt_norm = np.linalg.norm(txt_dir, axis=1)
    flags = (img_norm < DEGENERATE_NORM) | (txt_norm < DEGENERATE_NORM)
    per_item = []
    for i in range(n):
        if flags[i]:
            per_item.append(as_tensor(1.0))
            continue
        d = img_dir[i]
        cos = ops.tsum(d * (txt_dir[i] / txt_norm[i])) / ops.sqrt(ops.tsum(ops.square(d)))
        per_item.append(1.0 - cos)
    loss = per_item[0]
    for term in per_item[1:]:
        loss = loss + term
    loss = loss * (1.0 / n)
    return (loss if traced else float(loss.data)), flags


def identity_loss(embedder, x_gen, x_src):
    """Mean ``1 − cos`` of identity embeddings; degenerate items give 1 and are flagged."""
    traced = isinstance(x_gen, Tensor)
    xg, xs = _batch(x_gen), _batch(np.asarray(x_src.data if isinstance(x_src, Tensor) else x_src))
    a = embedder.embed_tensor(xg)
    b = embedder.embed_tensor(xs).data
    raw_a = np.linalg.norm(a.data, axis=1)
    flags = (raw_a < DEGENERATE_NORM) | (np.linalg.norm(b, axis=1) < DEGENERATE_NORM)
    cos = ops.tsum(a * b, axis=1)
    per = 1.0 - cos
    if np.any(flags):
        per = per * (~flags).astype(np.float64) + flags.astype(np.float64)
    loss = ops.tmean(per)
    return (loss if traced else float(loss.data)), flags


def l2_loss(x_gen, x_src):
    """Mean squared pixel difference."""
    traced = isinstance(x_gen, Tensor)
    loss = ops.tmean(ops.square(_batch(x_gen) - _batch(np.asarray(x_src)).data))
    return loss if traced else float(loss.data)


def total_loss(l_dir, l_id, l_l2, config: FinetuneConfig):
    """λ_dir·L_dir + λ_id·L_id + λ_ℓ2·L_ℓ2."""
    return config.lambda_dir * l_dir + config.lambda_id * l_id + config.lambda_l2 * l_l2


# precomputed latents ---------------------------------------------------------

@dataclass
class LatentStore:
    """Inverted latents ``z_{t0}`` keyed by image id, plus what produced them."""

    key: dict
    ids: list[str]
    latents: np.ndarray
    images: np.ndarray
    labels: np.ndarray

    @property
    def config_hash(self) -> str:
        return store_hash(self.key)

    def __len__(self) -> int:
        return len(self.ids)

    def save(self, path) -> None:
        header = {"format": "diffedit-latents/1", "key": self.key, "config_hash": self.config_hash,
                  "ids": self.ids, "labels": [int(v) for v in self.labels],
                  "latent_shape": list(self.latents.shape), "image_shape": list(self.images.shape)}
        blob = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            fh.write(self.latents.astype("<f8").tobytes())
            fh.write(self.images.astype("<f8").tobytes())

    @classmethod
    def load(cls, path, expect_key: dict | None = None) -> "LatentStore":
        with open(path, "rb") as fh:
            (n,) = struct.unpack("<Q", fh.read(8))
            header = json.loads(fh.read(n))
            ls = tuple(header["latent_shape"])
            ims = tuple(header["image_shape"])
            lat = np.frombuffer(fh.read(8 * int(np.prod(ls))), dtype="<f8").reshape(ls).copy()
            img = np.frombuffer(fh.read(8 * int(np.prod(ims))), dtype="<f8").reshape(ims).copy()
        store = cls(header["key"], list(header["ids"]), lat, img, np.asarray(header["labels"]))
        if expect_key is not None and store_hash(expect_key) != store.config_hash:
            raise StalenessError(f"latent store {path} was built for {store.key}, expected {expect_key}")
        return store


def store_hash(key: dict) -> str:
    return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:16]


def precompute_latents(denoiser: DenoiserParams, schedule: NoiseSchedule, first_stage: FirstStage,
                       images, labels, t0: int, T_ddim: int, gamma: float = 1.0, ids=None,
                       existing: LatentStore | None = None, base_hash: str = "") -> LatentStore:
    """Deterministic (η = 0) inversion of every image to ``t0``."""
    key = {"t0": int(t0), "T_ddim": int(T_ddim), "gamma": float(gamma), "base": base_hash}
    if existing is not None and existing.config_hash != store_hash(key):
        raise StalenessError(f"existing store has key {existing.key}, requested {key}")
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    ids = [str(i) for i in (ids if ids is not None else range(len(images)))]
    plan = build_step_plan(T_ddim, t0, schedule.T)
    z0 = first_stage.encode(images)
    z_t0, _ = ddim_invert(denoiser, z0, labels, plan, schedule, gamma)
    return LatentStore(key, ids, np.asarray(z_t0), images, labels)


def select_training_latents(images_per_class: dict, count: int, subsample: int, rng: RngStream):
    """Indices: up to ``count`` per class, then a random subsample of the pool."""
    pool = np.concatenate([np.asarray(v)[:count] for v in images_per_class.values()])
    if subsample < len(pool):
        pool = pool[np.sort(rng.permutation(len(pool))[:subsample])]
    return pool


# finetuning ------------------------------------------------------------------

def finetune_loss(params: DenoiserParams, weights, z_t0, x_src, y_src, y_trg: int,
                  first_stage: FirstStage, schedule: NoiseSchedule, oracle: EmbedderOracle,
                  embedder, config: FinetuneConfig):
    """Total finetuning loss of one batch; differentiable w.r.t. ``weights``.

    Returns ``(loss, parts, flags)``.
    """
    plan = build_step_plan(config.T_tune, config.t0, schedule.T)
    times = plan.descending + [0]
    depth = len(times) - 1 if config.grad_depth is None else config.grad_depth
    z = as_tensor(z_t0)
    for i, (t_cur, t_prev) in enumerate(zip(times[:-1], times[1:])):
        w = weights if i >= len(times) - 1 - depth else None
        z = ddim_step(params, z, t_cur, t_prev, y_trg, 0.0, schedule, gamma=config.gamma, weights=w)
        z = as_tensor(z)
    x_gen = first_stage.decode(z)
    l_dir, flags = directional_loss(oracle, x_gen, x_src, y_trg, y_src)
    l_id, id_flags = identity_loss(embedder, x_gen, x_src)
    l_l2 = l2_loss(x_gen, x_src)
    loss = total_loss(l_dir, l_id, l_l2, config)
    parts = {"dir": float(as_tensor(l_dir).data), "id": float(as_tensor(l_id).data),
             "l2": float(as_tensor(l_l2).data)}
    return as_tensor(loss), parts, flags | id_flags


def finetune(base: DenoiserParams, store: LatentStore, y_trg: int, oracle: EmbedderOracle, embedder,
             first_stage: FirstStage, schedule: NoiseSchedule, config: FinetuneConfig):
    """Finetune a copy of ``base`` towards ``y_trg``; ``base`` is left untouched.

    Returns ``(tuned_params, history)`` where history holds per-epoch mean losses.
    """
    params = base.copy()
    keep = np.flatnonzero(store.labels != y_trg)
    if keep.size == 0:
        raise ValueError(f"no stored latents with a source label other than {y_trg}")
    rng = RngStream(config.seed, 0x74756E65 + int(y_trg))
    opt = AdamW(config.learning_rate)
    history = []
    for epoch in range(config.epochs):
        order = keep[rng.permutation(keep.size)]
        losses = []
        for s in range(0, order.size, config.batch_size):
            idx = order[s:s + config.batch_size]
            weights = params.traced()
            loss, parts, flags = finetune_loss(params, weights, store.latents[idx], store.images[idx],
                                               store.labels[idx], y_trg, first_stage, schedule,
                                               oracle, embedder, config)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError("non-finite finetuning loss", {"epoch": epoch, "parts": parts})
            if np.all(flags):
                continue
            opt.step(params.weights, ops.backward(loss, weights))
            losses.append(value)
        history.append(float(np.mean(losses)) if losses else float("nan"))
        log.debug("finetune y=%d epoch %d loss %.4f", y_trg, epoch, history[-1])
    return params, history


def tuned_key(y_trg: int, gamma: float, lambda_dir: float) -> dict:
    return {"y_trg": int(y_trg), "gamma": float(gamma), "lambda_dir": float(lambda_dir)}


def config_dict(config: FinetuneConfig) -> dict:
    return asdict(config)
