"""Glue between run configs, fitted models and checkpoint files.

:func:`build_world` trains (or reloads) everything an editing run needs: the
toy train/test sets, the first stage, the conditional denoiser and the two
frozen evaluators.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, CheckpointError
from .config import RunConfig
from .denoiser import ConditionalDenoiser, DenoiserParams
from .editing import EditConfig
from .first_stage import FirstStage
from .guidance import FinetuneConfig, tuned_key
from .schedule import linear_schedule
from .toyworld.dataset import ToyDataset, calibrate, make_dataset
from .toyworld.oracles import EmotionOracle, IdentityEmbedder

log = logging.getLogger(__name__)

CHECKPOINT_NAMES = {
    "first_stage": "first_stage.ckpt",
    "denoiser": "denoiser.ckpt",
    "oracle": "oracle.ckpt",
    "embedder": "embedder.ckpt",
}

# fitted attributes stored alongside the weights of each estimator
_FITTED = {
    "FirstStage": ("image_shape_", "latent_shape_", "latent_mean_", "latent_std_", "codebook_usage_"),
    "EmotionOracle": ("classes_", "prototypes_"),
    "IdentityEmbedder": ("freqs_", "phases_"),
}
_ESTIMATORS = {"FirstStage": FirstStage, "EmotionOracle": EmotionOracle,
               "IdentityEmbedder": IdentityEmbedder}


class KeyMismatchError(CheckpointError):
    """A tuned checkpoint was requested under a different (target, γ, λ_dir) key."""


# estimators <-> checkpoints ----------------------------------------------------

def estimator_checkpoint(est, module: str, config_hash: str = "", seed: int = 0) -> Checkpoint:
    name = type(est).__name__
    tensors = {f"w.{k}": v for k, v in est.weights_.items()}
    attrs = {}
    for attr in _FITTED[name]:
        val = getattr(est, attr, None)
        if isinstance(val, np.ndarray) and val.dtype.kind == "f":
            tensors[f"a.{attr}"] = val
        elif val is not None:
            attrs[attr] = np.asarray(val).tolist()
    meta = {"estimator": name, "params": est.get_params(), "attrs": attrs,
            "loss_history": [float(v) for v in getattr(est, "loss_history_", [])]}
    return Checkpoint(module, tensors, meta, config_hash, seed)


def estimator_from_checkpoint(ckpt: Checkpoint):
    name = ckpt.meta.get("estimator")
    if name not in _ESTIMATORS:
        raise CheckpointError(f"unknown estimator {name!r} in {ckpt.module} checkpoint")
    params = {k: tuple(v) if isinstance(v, list) else v for k, v in ckpt.meta["params"].items()}
    est = _ESTIMATORS[name](**params)
    est.weights_ = {k[2:]: v.copy() for k, v in ckpt.tensors.items() if k.startswith("w.")}
    for k, v in ckpt.tensors.items():
        if k.startswith("a."):
            setattr(est, k[2:], v.copy())
    for attr, v in ckpt.meta["attrs"].items():
        setattr(est, attr, tuple(v) if attr.endswith("shape_") else np.asarray(v))
    est.loss_history_ = list(ckpt.meta.get("loss_history", []))
    if name == "FirstStage" and not hasattr(est, "codebook_usage_"):
        est.codebook_usage_ = None
    return est


def params_checkpoint(params: DenoiserParams, module: str = "denoiser", schedule=None,
                      key: dict | None = None, config_hash: str = "", seed: int = 0,
                      extra: dict | None = None) -> Checkpoint:
    meta = {"arch": params.arch()}
    if schedule is not None:
        meta["schedule"] = {"T": schedule.T, "beta_start": float(schedule.betas[0]),
                            "beta_end": float(schedule.betas[-1])}
    if key is not None:
        meta["key"] = key
    meta.update(extra or {})
    return Checkpoint(module, dict(params.weights), meta, config_hash, seed)


def params_from_checkpoint(ckpt: Checkpoint, expect_key: dict | None = None) -> DenoiserParams:
    if expect_key is not None and ckpt.meta.get("key") != expect_key:
        raise KeyMismatchError(f"checkpoint is keyed {ckpt.meta.get('key')}, requested {expect_key}")
    a = ckpt.meta["arch"]
    return DenoiserParams(tuple(a["data_shape"]), a["num_classes"], a["width"], a["depth"],
                          a["d_cls"], a["time_dim"], {k: v.copy() for k, v in ckpt.tensors.items()})


def denoiser_checkpoint(den: ConditionalDenoiser, config_hash: str = "", seed: int = 0) -> Checkpoint:
    return params_checkpoint(den.params_, "denoiser", den.schedule_, None, config_hash, seed,
                             {"params": den.get_params(),
                              "loss_history": [float(v) for v in den.loss_history_]})


def denoiser_from_checkpoint(ckpt: Checkpoint) -> ConditionalDenoiser:
    den = ConditionalDenoiser(**ckpt.meta["params"])
    den.params_ = params_from_checkpoint(ckpt)
    s = ckpt.meta["schedule"]
    den.schedule_ = linear_schedule(s["T"], s["beta_start"], s["beta_end"])
    den.loss_history_ = list(ckpt.meta.get("loss_history", []))
    return den


# config -> component configs --------------------------------------------------

def first_stage_from_config(cfg: RunConfig) -> FirstStage:
    s = cfg.section("first_stage")
    return FirstStage(mode=s["mode"], f=s["f"], c=s["c"], hidden=s["hidden"], n_codes=s["n_codes"],
                      beta_commit=s["beta_commit"], epochs=s["epochs"], batch_size=s["batch_size"],
                      learning_rate=s["learning_rate"], random_state=cfg.seed)


def denoiser_from_config(cfg: RunConfig) -> ConditionalDenoiser:
    d, s = cfg.section("denoiser"), cfg.section("schedule")
    return ConditionalDenoiser(width=d["width"], depth=d["depth"], d_cls=d["d_cls"],
                               time_dim=d["time_dim"], T=s["T"], beta_start=s["beta_start"],
                               beta_end=s["beta_end"], p_uncond=d["p_uncond"],
                               learning_rate=d["learning_rate"], batch_size=d["batch_size"],
                               epochs=d["epochs"], optimizer=d["optimizer"],
                               weight_decay=d["weight_decay"], random_state=cfg.seed)


def edit_config(cfg: RunConfig, **overrides) -> EditConfig:
    e = cfg.section("edit")
    base = dict(T_ddim=e["T_ddim"], t0=e["t0"], eta=e["eta"], gamma=e["gamma"],
                y_src=e["src"], y_trg=e["trg"])
    base.update(overrides)
    return EditConfig(**base)


def finetune_config(cfg: RunConfig, **overrides) -> FinetuneConfig:
    f = cfg.section("finetune")
    base = dict(lambda_dir=f["lambda_dir"], lambda_id=f["lambda_id"], lambda_l2=f["lambda_l2"],
                T_tune=f["t_tune"], t0=f["t0"], gamma=f["gamma"], epochs=f["epochs"],
                learning_rate=f["learning_rate"], batch_size=f["batch_size"],
                precompute_count=f["precompute_count"], subsample=f["subsample"],
                grad_depth=f["grad_depth"] or None, seed=cfg.seed)
    base.update(overrides)
    return FinetuneConfig(**base)


def tuned_name(y_trg: int, gamma: float, lambda_dir: float) -> str:
    return f"tuned_y{int(y_trg)}_g{gamma:g}_l{lambda_dir:g}.ckpt"


# the toy world -----------------------------------------------------------------

def train_set(cfg: RunConfig) -> ToyDataset:
    return make_dataset(cfg["data.n_train"], cfg.seed, stream=0, size=cfg["data.size"], prefix="train")


def test_set(cfg: RunConfig) -> ToyDataset:
    return make_dataset(cfg["data.n_test"], cfg.seed, stream=1, size=cfg["data.size"], prefix="test")


@dataclass
class World:
    config: RunConfig
    train: ToyDataset
    test: ToyDataset
    first_stage: FirstStage
    denoiser: ConditionalDenoiser
    oracle: EmotionOracle
    embedder: IdentityEmbedder
    calibration: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    @property
    def params(self) -> DenoiserParams:
        return self.denoiser.params_

    @property
    def schedule(self):
        return self.denoiser.schedule_


def _cached(path: Path | None, module: str, digest: str, fit, to_ckpt, from_ckpt, seed: int):
    """Load ``path`` when it was written under ``digest``; otherwise fit and save."""
    if path is not None and path.exists():
        ckpt = Checkpoint.load(path, module)
        if ckpt.config_hash == digest:
            return from_ckpt(ckpt), 0.0
        log.info("%s: config changed, retraining", path)
    t = time.perf_counter()
    model = fit()
    elapsed = time.perf_counter() - t
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        to_ckpt(model, digest, seed).save(path)
    return model, elapsed


def fit_first_stage(cfg: RunConfig, train: ToyDataset) -> FirstStage:
    return first_stage_from_config(cfg).fit(train.images)


def fit_denoiser(cfg: RunConfig, fs: FirstStage, train: ToyDataset) -> ConditionalDenoiser:
    return denoiser_from_config(cfg).fit(fs.encode(train.images), train.labels)


def fit_oracle(cfg: RunConfig, train: ToyDataset) -> EmotionOracle:
    return EmotionOracle(epochs=cfg["oracle.epochs"], random_state=cfg.seed).fit(train.images, train.labels)


def fit_embedder(cfg: RunConfig, train: ToyDataset) -> IdentityEmbedder:
    return IdentityEmbedder(epochs=cfg["embedder.epochs"], random_state=cfg.seed).fit(
        train.images, train.identities)


def world_digests(cfg: RunConfig) -> dict:
    fs = cfg.subset_hash("data", "first_stage")
    return {"first_stage": fs,
            "denoiser": cfg.subset_hash("data", "first_stage", "schedule", "denoiser"),
            "oracle": cfg.subset_hash("data", "oracle"),
            "embedder": cfg.subset_hash("data", "embedder")}


def build_world(cfg: RunConfig, checkpoint_dir=None, strict_calibration: bool = True,
                parts=("first_stage", "denoiser", "oracle", "embedder")) -> World:
    """Train or reload the requested parts; checkpoints are reused when their config hash matches."""
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    path = (lambda k: ckdir / CHECKPOINT_NAMES[k]) if ckdir is not None else (lambda k: None)
    digests = world_digests(cfg)
    train, test = train_set(cfg), test_set(cfg)
    timings = {}
    est_ckpt = {k: (lambda m, d, s, k=k: estimator_checkpoint(m, k, d, s)) for k in CHECKPOINT_NAMES}

    fs = den = oracle = embedder = None
    if "first_stage" in parts or "denoiser" in parts:
        fs, timings["first_stage"] = _cached(path("first_stage"), "first_stage", digests["first_stage"],
                                             lambda: fit_first_stage(cfg, train), est_ckpt["first_stage"],
                                             estimator_from_checkpoint, cfg.seed)
    if "denoiser" in parts:
        den, timings["denoiser"] = _cached(path("denoiser"), "denoiser", digests["denoiser"],
                                           lambda: fit_denoiser(cfg, fs, train),
                                           lambda m, d, s: denoiser_checkpoint(m, d, s),
                                           denoiser_from_checkpoint, cfg.seed)
    if "oracle" in parts:
        oracle, timings["oracle"] = _cached(path("oracle"), "oracle", digests["oracle"],
                                            lambda: fit_oracle(cfg, train), est_ckpt["oracle"],
                                            estimator_from_checkpoint, cfg.seed)
    if "embedder" in parts:
        embedder, timings["embedder"] = _cached(path("embedder"), "embedder", digests["embedder"],
                                                lambda: fit_embedder(cfg, train), est_ckpt["embedder"],
                                                estimator_from_checkpoint, cfg.seed)
    calibration = {}
    if oracle is not None and embedder is not None:
        calibration = calibrate(oracle, embedder, test, seed=cfg.seed, strict=strict_calibration)
    return World(cfg, train, test, fs, den, oracle, embedder, calibration, timings)


__all__ = ["CHECKPOINT_NAMES", "KeyMismatchError", "World", "build_world", "denoiser_checkpoint",
           "denoiser_from_checkpoint", "denoiser_from_config", "edit_config", "estimator_checkpoint",
           "estimator_from_checkpoint", "finetune_config", "first_stage_from_config",
           "params_checkpoint", "params_from_checkpoint", "test_set", "train_set", "tuned_key",
           "tuned_name", "world_digests"]
