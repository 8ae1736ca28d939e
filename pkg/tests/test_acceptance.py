"""End-to-end acceptance checks on the toy world.

Each test prints one ``PASS``/``FAIL`` line for its criterion; the lines are
collected again in the terminal summary. The trained world is cached under
``$DIFFEDIT_ACCEPTANCE_CACHE`` (default ``.cache/acceptance``) so reruns
skip training.
"""
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from diffedit.config import defaults
from diffedit.denoiser import TrainConfig, init_params, train_step
from diffedit.diffusion import (GuidanceSpec, cfg_eps, ddim_generate, ddim_invert, ddim_step, ddpm_step, guided_eps,
                                ode_residual_check)
from diffedit.editing import EditConfig, ablation_rows, edit_many
from diffedit.first_stage import FirstStage
from diffedit.guidance import (EmbedderOracle, FinetuneConfig, finetune, finetune_loss, precompute_latents,
                               select_training_latents)
from diffedit.numerics import cosine_similarity, ops
from diffedit.numerics.rng import RngStream
from diffedit.pipeline import build_world
from diffedit.schedule import build_step_plan, ddpm_sigma, linear_schedule
from diffedit.toyworld.metrics import psnr, ssim
from diffedit.toyworld.oracles import csim
from helpers import central_diff, central_diff_at, randomize

pytestmark = pytest.mark.acceptance

RESULTS: list[str] = []
CACHE = Path(os.environ.get("DIFFEDIT_ACCEPTANCE_CACHE", Path(__file__).resolve().parents[1] / ".cache/acceptance"))


def report(n: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="session")
def world():
    return build_world(defaults(), CACHE)


def _norm_rel(a, b) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


# 1 -------------------------------------------------------------------------------

class _Keep:
    """Optimizer stand-in that records gradients and leaves weights alone."""

    def __init__(self):
        self.grads = None

    def step(self, params, grads):
        self.grads = grads


def test_criterion_1_gradients(tiny_world):
    t_start = time.perf_counter()
    params = randomize(init_params((3,), num_classes=3, width=8, depth=2, d_cls=4, time_dim=8, seed=1))
    s = linear_schedule(100)
    z0, y = RngStream(1).gaussian((16, 3)), np.arange(16) % 3
    cfg = TrainConfig(p_uncond=0.25)
    spy = _Keep()
    train_step(params, (z0, y), s, RngStream(2), cfg, spy)

    def train_loss():
        return train_step(params, (z0, y), s, RngStream(2), cfg, _Keep())

    err_a = max(_norm_rel(spy.grads[k], central_diff(train_loss, w)) for k, w in params.weights.items())

    ds, fs, oracle, emb, tparams, ts = tiny_world
    fcfg = FinetuneConfig(T_tune=2, t0=30, gamma=2.0)
    z = RngStream(5).gaussian((3,) + tparams.data_shape)
    x_src, y_src = ds.images[:3], np.array([0, 2, 5])

    def ft_loss():
        return float(finetune_loss(tparams, tparams.weights, z, x_src, y_src, 1, fs, ts, oracle, emb, fcfg)[0].data)

    traced = tparams.traced()
    loss, _, _ = finetune_loss(tparams, traced, z, x_src, y_src, 1, fs, ts, oracle, emb, fcfg)
    grads = ops.backward(loss, traced)
    pick = RngStream(6)
    err_b = 0.0
    for k, w in tparams.weights.items():
        idx = np.sort(pick.permutation(w.size)[:48])  # a random coordinate sample per tensor
        err_b = max(err_b, _norm_rel(grads[k].reshape(-1)[idx], central_diff_at(ft_loss, w, idx)))
    elapsed = time.perf_counter() - t_start
    ok = err_a < 1e-4 and err_b < 1e-3 and elapsed < 10
    report(1, ok, f"training-loss rel err {err_a:.2e} (< 1e-4), finetune-loss rel err {err_b:.2e} (< 1e-3), "
                  f"{elapsed:.1f}s (< 10s)")


# 2 -------------------------------------------------------------------------------

def test_criterion_2_ddpm_ddim_equivalence(world):
    t_start = time.perf_counter()
    s, params = world.schedule, world.params
    n = 100_000
    z_fix = world.first_stage.encode(world.test.images[0])
    worst = 0.0
    for t in (2, 10, 50, 100):
        z1 = z_fix * np.sqrt(s.alpha_bar(t))
        # every trial shares z_t, so the network output is evaluated once and broadcast
        e = np.broadcast_to(guided_eps(params, z1[None], t, 3, 1.0)[0], (n,) + z1.shape)
        zt = np.broadcast_to(z1, e.shape)
        a = ddim_step(params, zt, t, t - 1, 3, 1.0, s, RngStream(11, t), eps_hat=e)
        b = ddpm_step(params, zt, t, 3, s, RngStream(12, t), eps_hat=e)
        sig = ddpm_sigma(s, t)
        d = a[0].size
        # coordinate-averaged statistics; each has a known Monte-Carlo standard error
        mean_gap = np.mean(a.mean(0) - b.mean(0))
        var_gap = np.mean(a.var(0) - b.var(0))
        z_mean = abs(mean_gap) / (sig * np.sqrt(2.0 / (n * d)))
        z_var = abs(var_gap) / (sig**2 * np.sqrt(2.0 / (n - 1)) * np.sqrt(2.0 / d))
        worst = max(worst, z_mean, z_var)
    elapsed = time.perf_counter() - t_start
    report(2, worst < 3 and elapsed < 60, f"largest moment gap {worst:.2f} sigma (< 3) over t in {{2,10,50,100}}, "
                                          f"{elapsed:.1f}s (< 60s)")


# 3 and 4 -------------------------------------------------------------------------

TRAJECTORIES = []


def test_criterion_3_determinism_and_inversion(world):
    t_start = time.perf_counter()
    s, params, fs = world.schedule, world.params, world.first_stage
    x, ys = world.test.images[:40], world.test.labels[:40]
    cfg = EditConfig(T_ddim=40, t0=50, gamma=3.0, eta=0.0)
    runs = [edit_many(fs, params, s, x, ys, (ys + 1) % 7, cfg, seed=sd, n_jobs=nj, chunk=8)
            for sd, nj in ((0, 1), (7, 4), (123, 2))]
    identical = all(np.array_equal(runs[0], r) for r in runs[1:])

    z0, y = fs.encode(world.test.images[:100]), world.test.labels[:100]
    errs = []
    for k in (10, 20, 40, 80):
        plan = build_step_plan(k, 80, s.T)
        zt, inv = ddim_invert(params, z0, y, plan, s)
        zb, gen = ddim_generate(params, zt, y, plan, s)
        TRAJECTORIES.extend([inv, gen])
        flat = lambda a: a.reshape(len(a), -1)
        errs.append(float(np.mean(np.linalg.norm(flat(zb - z0), axis=1) / np.linalg.norm(flat(z0), axis=1))))
    monotone = all(b <= a for a, b in zip(errs, errs[1:]))
    elapsed = time.perf_counter() - t_start
    report(3, identical and monotone and elapsed < 120,
           f"bit-identical across seeds/threads: {identical}; cycle error at T_ddim 10/20/40/80 (t0=80): "
           + "/".join(f"{e:.4f}" for e in errs) + f" non-increasing: {monotone}; {elapsed:.1f}s (< 120s)")


def test_criterion_4_ode_identity(world):
    s, params = world.schedule, world.params
    z0 = world.first_stage.encode(world.test.images[:20])
    y = world.test.labels[:20]
    trajs = list(TRAJECTORIES)
    for gamma, (T_ddim, t0) in ((1.0, (7, 33)), (3.0, (40, 50)), (5.0, (20, 60))):
        plan = build_step_plan(T_ddim, t0, s.T)
        zt, inv = ddim_invert(params, z0, y, plan, s, gamma)
        _, gen = ddim_generate(params, zt, (y + 2) % 7, plan, s, gamma)
        trajs += [inv, gen]
    worst = max(ode_residual_check(params, tr, s) for tr in trajs)
    report(4, worst < 1e-10, f"max residual {worst:.2e} (< 1e-10) over {len(trajs)} deterministic trajectories")


# 5 -------------------------------------------------------------------------------

def test_criterion_5_ablation_trends(world):
    t_start = time.perf_counter()
    t0s, gammas = (40, 50, 60), (1.0, 2.0, 3.0, 4.0, 5.0)
    rows = ablation_rows(world.first_stage, world.params, world.schedule, world.test.images, world.test.labels,
                         range(7), t0s, gammas, [40], world.oracle, world.embedder)
    n_min = min(r["n"] for r in rows)
    cell = {(r["target"], r["t0"], r["gamma"]): r for r in rows}
    pairs = [(cell[(c, t0, g1)]["accuracy"], cell[(c, t0, g2)]["accuracy"])
             for c in range(7) for t0 in t0s for g1, g2 in zip(gammas, gammas[1:])]
    frac_up = np.mean([b >= a for a, b in pairs])
    psnr_down = all(cell[(c, 40, g)]["psnr"] > cell[(c, 50, g)]["psnr"] > cell[(c, 60, g)]["psnr"]
                    for c in range(7) for g in gammas)
    mean_acc = {(t0, g): np.mean([cell[(c, t0, g)]["accuracy"] for c in range(7)]) for t0 in t0s for g in gammas}
    best = max(mean_acc.values())
    top = mean_acc[(60, 5.0)] == best
    elapsed = time.perf_counter() - t_start
    ok = n_min >= 200 and frac_up >= 0.9 and psnr_down and top and elapsed < 20 * 60
    report(5, ok, f">= {n_min} images/cell; accuracy non-decreasing in gamma on {frac_up:.0%} of {len(pairs)} pairs "
                  f"(>= 90%); PSNR strictly decreasing in t0 for every (target, gamma): {psnr_down}; "
                  f"(gamma=5, t0=60) mean accuracy {mean_acc[(60, 5.0)]:.3f} vs best {best:.3f}; "
                  f"{elapsed / 60:.1f} min (< 20)")


# 6 -------------------------------------------------------------------------------

def test_criterion_6_finetuning_tradeoff(world):
    t_start = time.perf_counter()
    s, params, fs = world.schedule, world.params, world.first_stage
    train, test = world.train, world.test
    pools = {c: np.flatnonzero(train.labels == c) for c in range(7)}
    idx = select_training_latents(pools, 50, 100, RngStream(0, 0x6C6174))
    store = precompute_latents(params, s, fs, train.images[idx], train.labels[idx], t0=50, T_ddim=40)
    oracle = EmbedderOracle(world.oracle)
    edit_cfg = EditConfig(T_ddim=40, t0=50, gamma=1.0)
    wins, lines = 0, []
    worst_drop = 0.0
    for trg in range(7):
        keep = test.labels != trg
        xs, ys = test.images[keep], test.labels[keep]
        acc, ps = {}, {}
        for lam in (0.0, 1.0, 2.0, 3.0):
            cfg = FinetuneConfig(lambda_dir=lam, epochs=10, learning_rate=2e-4, t0=50, gamma=1.0)
            tuned, _ = finetune(params, store, trg, oracle, world.embedder, fs, s, cfg)
            x_gen = edit_many(fs, tuned, s, xs, ys, trg, edit_cfg)
            acc[lam] = float(np.mean(world.oracle.predict(x_gen) == trg))
            ps[lam] = float(np.mean([psnr(a, b) for a, b in zip(x_gen, xs)]))
        drops = [(ps[0.0] - ps[lam]) / ps[0.0] for lam in (1.0, 2.0, 3.0)]
        worst_drop = max(worst_drop, max(drops))
        win = all(acc[lam] > acc[0.0] for lam in (1.0, 2.0, 3.0)) and max(drops) <= 0.2
        wins += win
        lines.append(f"{trg}:" + "/".join(f"{acc[lam]:.2f}" for lam in (0.0, 1.0, 2.0, 3.0)))
    elapsed = time.perf_counter() - t_start
    report(6, wins >= 5 and elapsed < 30 * 60,
           f"{wins}/7 targets improve for every lambda_dir in {{1,2,3}} over lambda_dir=0 with PSNR drop <= 20% "
           f"(worst drop {worst_drop:.1%}); accuracy by lambda 0/1/2/3: {' '.join(lines)}; "
           f"{elapsed / 60:.1f} min (< 30)")


# 7 -------------------------------------------------------------------------------

def test_criterion_7_identity_preservation(world):
    test = world.test
    n = 200
    src = test.images[:n]
    ys = test.labels[:n]
    yt = (ys + 1 + RngStream(0, 0x747267).integers(0, 6, size=n)) % 7
    x_gen = edit_many(world.first_stage, world.params, world.schedule, src, ys, yt,
                      EditConfig(T_ddim=40, t0=50, gamma=3.0))
    edited = csim(world.embedder, x_gen, src)
    # cross-identity reference: each source against a face of another identity
    others = np.roll(np.arange(len(test)), 17)[:n]
    cross = csim(world.embedder, test.images[others], src)
    frac = float(np.mean(edited > np.median(cross)))
    report(7, frac >= 0.9, f"edited CSIM above cross-identity median ({np.median(cross):.3f}) on {frac:.1%} "
                           f"of {n} triples (>= 90%)")


# 8 -------------------------------------------------------------------------------

def test_criterion_8_metric_units():
    x = np.zeros((10, 10))
    y = np.where(np.arange(100).reshape(10, 10) % 2 == 0, 0.1, -0.1)
    p = psnr(x, y)
    face = RngStream(1).uniform((16, 16))
    s = ssim(face, face)
    c = cosine_similarity([0.3, -1.0, 2.0], [0.3, -1.0, 2.0])
    probe = lambda z, t, lab: np.full(np.shape(z), 0.0 if lab is None else 1.0)
    g = float(cfg_eps(probe, np.zeros(1), 1, GuidanceSpec(3.0, 0))[0])
    ok = abs(p - 20.0) < 1e-12 and s == 1.0 and abs(c - 1.0) < 1e-15 and g == 3.0
    report(8, ok, f"PSNR(MSE=0.01)={p:.12f} dB, SSIM(x,x)={s}, cos(v,v)={c}, CFG probe={g}")


# 9 -------------------------------------------------------------------------------

def test_criterion_9_first_stage_round_trip(world):
    faces = world.test.images
    ident = FirstStage(mode="identity").fit(faces)
    exact = np.array_equal(ident.decode(ident.encode(faces)), faces)
    cfg = defaults().replace(first_stage__mode="vq-ae")
    vq = build_world(cfg, CACHE / "vq", parts=("first_stage",)).first_stage
    l1 = vq.reconstruction_l1(faces)
    usage = vq.codebook_usage(world.train.images)
    ok = exact and l1 < 0.05 and usage >= 0.25
    report(9, ok, f"identity mode exact: {exact}; vq-ae per-pixel l1 {l1:.4f} (< 0.05), "
                  f"codebook usage {usage:.0%} (>= 25%)")
