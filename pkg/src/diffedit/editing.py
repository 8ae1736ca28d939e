"""Image-to-image translation: encode, invert under the source label, regenerate
under the target label, decode."""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .config import ConfigError
from .denoiser import DenoiserParams, LabelError
from .diffusion import Trajectory, ddim_generate, ddim_invert
from .first_stage import FirstStage
from .numerics.rng import RngStream
from .schedule import NoiseSchedule, build_step_plan
from .toyworld.metrics import MetricsRow, format_metric, psnr, ssim
from .toyworld.oracles import csim


@dataclass(frozen=True)
class EditConfig:
    T_ddim: int = 40
    t0: int = 50
    eta: float = 0.0
    gamma: float = 3.0
    y_src: int = 0
    y_trg: int = 1
    invert_gamma: float | None = None

    def validate(self, T: int, num_classes: int) -> None:
        if not (2 <= self.T_ddim <= self.t0):
            raise ConfigError(f"need 2 <= T_ddim <= t0, got T_ddim={self.T_ddim}, t0={self.t0}")
        if self.t0 > T:
            raise ConfigError(f"t0={self.t0} exceeds T={T}")
        if self.eta < 0:
            raise ConfigError(f"eta must be >= 0, got {self.eta}")
        if self.gamma < 0 or (self.invert_gamma is not None and self.invert_gamma < 0):
            raise ConfigError("guidance scales must be >= 0")
        for name in ("y_src", "y_trg"):
            lab = getattr(self, name)
            if not 0 <= int(lab) < num_classes:
                raise LabelError(f"{name}={lab} out of range 0..{num_classes - 1}")

    @property
    def inversion_gamma(self) -> float:
        return self.gamma if self.invert_gamma is None else self.invert_gamma


@dataclass
class EditResult:
    x_gen: np.ndarray
    z_0: np.ndarray
    z_t0: np.ndarray
    z_hat: np.ndarray
    inversion: Trajectory = field(repr=False)
    generation: Trajectory = field(repr=False)
    reconstruction: np.ndarray | None = None

    @property
    def diagnostics(self) -> dict:
        d = {"inversion": self.inversion, "generation": self.generation}
        if self.reconstruction is not None:
            d["reconstruction"] = self.reconstruction
        return d


def edit(first_stage: FirstStage, denoiser: DenoiserParams, schedule: NoiseSchedule, image,
         config: EditConfig, rng: RngStream | None = None, audit: bool = True) -> EditResult:
    """Translate ``image`` (one image or a batch sharing ``config``) to ``config.y_trg``.

    With ``audit`` the matched-label round trip (regeneration under ``y_src``)
    is decoded too, giving the cycle-consistency reference for this edit.
    """
    config.validate(schedule.T, denoiser.num_classes)
    plan = build_step_plan(config.T_ddim, config.t0, schedule.T)
    z0 = first_stage.encode(image)
    z_t0, inv = ddim_invert(denoiser, z0, config.y_src, plan, schedule, config.inversion_gamma)
    z_hat, gen = ddim_generate(denoiser, z_t0, config.y_trg, plan, schedule, config.gamma,
                               config.eta, rng)
    x_gen = first_stage.decode(z_hat)
    recon = None
    if audit:
        if config.y_trg == config.y_src and config.eta == 0:
            recon = x_gen
        else:
            z_rec, _ = ddim_generate(denoiser, z_t0, config.y_src, plan, schedule, config.gamma)
            recon = first_stage.decode(z_rec)
    return EditResult(x_gen, z0, z_t0, z_hat, inv, gen, recon)


def edit_many(first_stage: FirstStage, denoiser: DenoiserParams, schedule: NoiseSchedule,
              images: np.ndarray, y_src, y_trg, config: EditConfig, seed: int = 0,
              n_jobs: int = 1, chunk: int = 64) -> np.ndarray:
    """Edit a batch with per-item labels; order and values independent of ``n_jobs``."""
    images = np.asarray(images, dtype=np.float64)
    y_src = np.broadcast_to(np.asarray(y_src), (len(images),))
    y_trg = np.broadcast_to(np.asarray(y_trg), (len(images),))
    config.validate(schedule.T, denoiser.num_classes)
    plan = build_step_plan(config.T_ddim, config.t0, schedule.T)
    starts = list(range(0, len(images), chunk))

    def work(k: int) -> np.ndarray:
        s = starts[k]
        sl = slice(s, s + chunk)
        rng = RngStream(seed, k) if config.eta > 0 else None
        z0 = first_stage.encode(images[sl])
        z_t0, _ = ddim_invert(denoiser, z0, y_src[sl], plan, schedule, config.inversion_gamma)
        z_hat, _ = ddim_generate(denoiser, z_t0, y_trg[sl], plan, schedule, config.gamma,
                                 config.eta, rng)
        return first_stage.decode(z_hat)

    if n_jobs == 1:
        parts = [work(k) for k in range(len(starts))]
    else:
        with ThreadPoolExecutor(n_jobs) as pool:
            parts = list(pool.map(work, range(len(starts))))
    if not parts:
        return np.zeros((0,) + images.shape[1:])
    return np.concatenate(parts, axis=0)


def score_edits(x_gen, x_src, y_trg, oracle, embedder) -> MetricsRow:
    """Target accuracy, mean PSNR/SSIM and mean CSIM-analog of a batch of edits."""
    x_gen = np.asarray(x_gen)
    x_src = np.asarray(x_src)
    acc = float(np.mean(oracle.predict(x_gen) == np.asarray(y_trg)))
    ps = [psnr(a, b) for a, b in zip(x_gen, x_src)]
    finite = [p for p in ps if not math.isinf(p)]
    mean_psnr = float(np.mean(finite)) if finite else math.inf
    ss = float(np.mean([ssim(a, b) for a, b in zip(x_gen, x_src)]))
    cs = float(np.mean(csim(embedder, x_gen, x_src)))
    return MetricsRow(acc, mean_psnr, ss, cs)


CSV_HEADER = ["t0", "gamma", "T_ddim", "y_src", "y_trg", "accuracy", "psnr", "ssim", "csim"]


def edit_batch(first_stage, denoiser, schedule, images, y_src, y_trg, config: EditConfig,
               grid, oracle, embedder, seed: int = 0, n_jobs: int = 1) -> list[dict]:
    """One metrics row per ``(t0, gamma, T_ddim)`` grid cell.

    ``y_src``/``y_trg`` are per-image label arrays; the row's label columns hold
    the single value when all items agree and ``"mixed"`` otherwise.
    """
    images = np.asarray(images)
    if len(images) == 0:
        raise ValueError("empty dataset slice")
    grid = list(grid)
    if not grid:
        raise ValueError("empty grid")
    y_src = np.broadcast_to(np.asarray(y_src), (len(images),))
    y_trg = np.broadcast_to(np.asarray(y_trg), (len(images),))

    def label(v):
        u = np.unique(v)
        return int(u[0]) if u.size == 1 else "mixed"

    rows = []
    for t0, gamma, T_ddim in grid:
        cfg = replace(config, t0=int(t0), gamma=float(gamma), T_ddim=int(T_ddim),
                      y_src=int(y_src[0]), y_trg=int(y_trg[0]))
        x_gen = edit_many(first_stage, denoiser, schedule, images, y_src, y_trg, cfg, seed, n_jobs)
        m = score_edits(x_gen, images, y_trg, oracle, embedder)
        rows.append({"t0": int(t0), "gamma": float(gamma), "T_ddim": int(T_ddim),
                     "y_src": label(y_src), "y_trg": label(y_trg), "accuracy": m.accuracy,
                     "psnr": m.psnr, "ssim": m.ssim, "csim": m.csim})
    return rows


def write_metrics_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow([r["t0"], f"{r['gamma']:g}", r["T_ddim"], r["y_src"], r["y_trg"],
                        format_metric(r["accuracy"]), format_metric(r["psnr"]),
                        format_metric(r["ssim"]), format_metric(r["csim"])])


def ablation_rows(first_stage, denoiser, schedule, images, labels, targets, t0s, gammas, T_ddims,
                  oracle, embedder, eta: float = 0.0, seed: int = 0, n_jobs: int = 1) -> list[dict]:
    """One row per ``(target, t0, gamma, T_ddim)``, sorted in that order.

    Each target edits every image whose source label differs from it. Rows
    carry the fraction of edits predicted as each class (``pred`` array) next
    to the target accuracy and the quality metrics.
    """
    images = np.asarray(images)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise ValueError("empty dataset slice")
    cells = [(int(t0), float(g), int(T)) for t0 in t0s for g in gammas for T in T_ddims]
    if not cells or not len(targets):
        raise ValueError("empty grid")
    C = denoiser.num_classes
    rows = []
    for trg in sorted(int(t) for t in targets):
        keep = labels != trg
        xs, ys = images[keep], labels[keep]
        for t0, g, T in sorted(cells):
            cfg = EditConfig(T_ddim=T, t0=t0, eta=eta, gamma=g, y_src=int(ys[0]), y_trg=trg)
            x_gen = edit_many(first_stage, denoiser, schedule, xs, ys, trg, cfg, seed, n_jobs)
            pred = oracle.predict(x_gen)
            m = score_edits(x_gen, xs, np.full(len(xs), trg), oracle, embedder)
            rows.append({"target": trg, "t0": t0, "gamma": g, "T_ddim": T, "n": int(len(xs)),
                         "pred": np.bincount(pred, minlength=C) / len(pred),
                         "accuracy": m.accuracy, "psnr": m.psnr, "ssim": m.ssim, "csim": m.csim})
    return rows


def write_ablation_csv(rows, path, class_names) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["target", "t0", "gamma", "T_ddim", "n", *(f"acc_{c}" for c in class_names),
                    "accuracy", "psnr", "ssim", "csim"])
        for r in rows:
            w.writerow([r["target"], r["t0"], f"{r['gamma']:g}", r["T_ddim"], r["n"],
                        *(format_metric(float(v)) for v in r["pred"]), format_metric(r["accuracy"]),
                        format_metric(r["psnr"]), format_metric(r["ssim"]), format_metric(r["csim"])])
