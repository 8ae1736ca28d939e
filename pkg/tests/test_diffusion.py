import csv

import numpy as np
import pytest

from diffedit.diffusion import (GuidanceError, GuidanceSpec, TrajectoryError, cfg_eps, ddim_generate,
                                ddim_invert, ddim_step, ddpm_sample, ddpm_step, f_theta, forward_noise,
                                guided_eps, ode_residual_check, trajectory_to_csv)
from diffedit.denoiser import predict_eps
from diffedit.numerics.rng import RngStream
from diffedit.schedule import build_step_plan, ddpm_sigma, linear_schedule
from helpers import gaussian_eps


def _zero(z, t, y):
    return np.zeros_like(np.asarray(z))


# --- forward noising and f_theta ---------------------------------------------

def test_zero_noise_scales_by_sqrt_alpha_bar(schedule):
    z0 = np.array([1.0, -2.0, 0.5])
    zt, _ = forward_noise(z0, 30, schedule, eps=np.zeros(3))
    assert np.array_equal(zt, np.sqrt(schedule.alpha_bar(30)) * z0)


def test_forward_noise_variance_and_range(schedule):
    zt, eps = forward_noise(np.zeros(100_000), 40, schedule, RngStream(1))
    assert zt.var() == pytest.approx(1 - schedule.alpha_bar(40), rel=0.02)
    assert eps.shape == zt.shape
    with pytest.raises(IndexError):
        forward_noise(np.zeros(2), 0, schedule, RngStream(1))
    with pytest.raises(IndexError):
        forward_noise(np.zeros(2), 101, schedule, RngStream(1))


def test_terminal_state_is_standard_normal():
    s = linear_schedule(1000)
    zt, _ = forward_noise(np.full(100_000, 1.0), 1000, s, RngStream(2))
    assert abs(zt.mean()) < 0.02 and abs(zt.var() - 1) < 0.02


def test_forward_marginal_matches_composed_single_steps(schedule):
    z0 = np.full(100_000, 1.5)
    r = RngStream(3)
    z = z0.copy()
    for t in range(1, 21):
        z = np.sqrt(schedule.alpha(t)) * z + np.sqrt(schedule.beta(t)) * r.gaussian(z.shape)
    direct, _ = forward_noise(z0, 20, schedule, RngStream(4))
    se = np.sqrt(direct.var() / z.size)
    assert abs(z.mean() - direct.mean()) < 3 * np.sqrt(2) * se
    assert abs(z.var() - direct.var()) < 3 * direct.var() * np.sqrt(4 / z.size)


def test_f_theta_inverts_forward_noise_with_true_eps(schedule):
    z0 = RngStream(5).gaussian(8)
    zt, eps = forward_noise(z0, 70, schedule, RngStream(6))
    x0 = f_theta(lambda z, t, y: eps, zt, 70, 0, schedule)
    assert np.allclose(x0, z0, rtol=0, atol=1e-12)
    assert np.allclose(f_theta(_zero, zt, 70, 0, schedule), zt / np.sqrt(schedule.alpha_bar(70)), rtol=1e-15, atol=0)


def test_f_theta_error_grows_with_t(schedule):
    model = gaussian_eps(schedule, [0.0], std=0.5)
    z0 = 0.5 * RngStream(7).gaussian((4000, 2))
    err = []
    for t in (5, 80):
        zt, _ = forward_noise(z0, t, schedule, RngStream(8))
        err.append(np.linalg.norm(f_theta(model, zt, t, 0, schedule) - z0, axis=1).mean())
    assert err[0] < err[1]


# --- ancestral and DDIM steps ------------------------------------------------

def test_ddpm_step_deterministic_algebra(schedule):
    z0 = RngStream(9).gaussian(4)
    zt, eps = forward_noise(z0, 1, schedule, RngStream(10))
    out = ddpm_step(None, zt, 1, 0, schedule, eps_hat=eps)
    a = schedule.alpha(1)
    expect = (zt - (1 - a) / np.sqrt(1 - schedule.alpha_bar(1)) * eps) / np.sqrt(a)
    assert np.allclose(out, expect, rtol=0, atol=1e-15)
    assert np.allclose(out, z0, atol=1e-12)  # at t=1 the mean step is the exact inverse


def test_ddpm_step_reproducible(tiny_params, schedule):
    z = RngStream(0).gaussian(3)
    a = ddpm_step(tiny_params, z, 50, 1, schedule, RngStream(3, 3))
    b = ddpm_step(tiny_params, z, 50, 1, schedule, RngStream(3, 3))
    assert np.array_equal(a, b)


def test_ddpm_chain_samples_data_distribution():
    s = linear_schedule(1000)  # the chain must start from (almost) pure noise
    model = gaussian_eps(s, [1.2], std=0.4)
    x = ddpm_sample(model, (40_000,), 0, s, RngStream(11))
    n = x.size
    assert abs(x.mean() - 1.2) < 3 * 0.4 / np.sqrt(n) + 0.01
    assert abs(x.var() - 0.16) < 3 * 0.16 * np.sqrt(2 / n) + 0.005


def test_ddim_eta_zero_ignores_rng(tiny_params, schedule):
    z = RngStream(1).gaussian((4, 3))
    a = ddim_step(tiny_params, z, 60, 30, 2, 0.0, schedule, RngStream(1))
    b = ddim_step(tiny_params, z, 60, 30, 2, 0.0, schedule, RngStream(999))
    assert np.array_equal(a, b)


@pytest.mark.parametrize("t", [2, 10, 60])
def test_ddim_eta_one_consecutive_matches_ddpm_moments(schedule, t):
    n, d = 100_000, 2
    model = gaussian_eps(schedule, [0.7], std=0.5)
    z = np.broadcast_to(np.array([0.3, -1.1]), (n, d))
    a = ddim_step(model, z, t, t - 1, 0, 1.0, schedule, RngStream(12))
    b = ddpm_step(model, z, t, 0, schedule, RngStream(13))
    sigma = ddpm_sigma(schedule, t)
    se_mean = sigma / np.sqrt(n)
    se_var = sigma**2 * np.sqrt(2 / (n - 1))
    assert np.all(np.abs(a.mean(0) - b.mean(0)) < 3 * np.sqrt(2) * se_mean)
    assert np.all(np.abs(a.var(0) - b.var(0)) < 3 * np.sqrt(2) * se_var)
    assert np.all(np.abs(a.var(0) - sigma**2) < 3 * se_var)


def test_two_step_plan_matches_hand_computation(schedule):
    model = gaussian_eps(schedule, [0.0, 1.0], std=0.5)
    plan = build_step_plan(2, 60, 100)
    z60 = np.array([0.4, -0.9])
    out, traj = ddim_generate(model, z60, 1, plan, schedule)
    ab60, ab1 = schedule.alpha_bar(60), schedule.alpha_bar(1)
    e = model(z60, 60, 1)
    x0 = (z60 - np.sqrt(1 - ab60) * e) / np.sqrt(ab60)
    z1 = np.sqrt(ab1) * x0 + np.sqrt(1 - ab1) * e
    e1 = model(z1, 1, 1)
    expect = (z1 - np.sqrt(1 - ab1) * e1) / np.sqrt(ab1)
    assert np.allclose(out, expect, rtol=0, atol=1e-14)
    assert traj.times == [60, 1, 0]


# --- guidance -----------------------------------------------------------------

def _probe(e_null, e_cond):
    return lambda z, t, y: np.full_like(np.asarray(z, dtype=float), e_null if y is None else e_cond)


def test_cfg_scalar_probe():
    assert float(cfg_eps(_probe(0.0, 1.0), np.zeros(1), 5, GuidanceSpec(3.0, 1))[0]) == 3.0


def test_cfg_collapses_at_gamma_zero_and_one(tiny_params):
    z = RngStream(2).gaussian((5, 3))
    assert np.allclose(cfg_eps(tiny_params, z, 9, GuidanceSpec(1.0, 2)), predict_eps(tiny_params, z, 9, 2),
                       rtol=0, atol=1e-14)
    assert np.allclose(cfg_eps(tiny_params, z, 9, GuidanceSpec(0.0, 2)), predict_eps(tiny_params, z, 9, None),
                       rtol=0, atol=1e-14)
    single = cfg_eps(tiny_params, z[0], 9, GuidanceSpec(2.5, 1))
    assert single.shape == (3,)
    assert np.allclose(single, cfg_eps(tiny_params, z, 9, GuidanceSpec(2.5, 1))[0], atol=1e-14)


def test_cfg_errors():
    with pytest.raises(GuidanceError):
        cfg_eps(_probe(0, 1), np.zeros(1), 5, GuidanceSpec(2.0, None))
    with pytest.raises(GuidanceError):
        GuidanceSpec(float("nan"), 1)
    with pytest.raises(GuidanceError):
        guided_eps(_probe(0, 1), np.zeros(1), 5, None, 2.0)


# --- inversion, cycle and ODE residual ----------------------------------------

def _cycle_error(model, schedule, z0, T_ddim, t0=80):
    plan = build_step_plan(T_ddim, t0, schedule.T)
    zt, _ = ddim_invert(model, z0, 1, plan, schedule)
    back, _ = ddim_generate(model, zt, 1, plan, schedule)
    return float(np.mean(np.linalg.norm(back - z0, axis=1) / np.linalg.norm(z0, axis=1)))


def test_cycle_error_small_and_non_increasing(schedule):
    model = gaussian_eps(schedule, [0.0, 1.0], std=0.5)
    z0 = 1.0 + 0.5 * RngStream(14).gaussian((100, 4))
    errs = [_cycle_error(model, schedule, z0, k) for k in (10, 20, 40, 80)]
    assert all(b <= a for a, b in zip(errs, errs[1:])), errs
    assert errs[-1] < 1e-2


def test_inversion_trajectory_follows_plan(tiny_params, schedule):
    plan = build_step_plan(5, 40, 100)
    _, traj = ddim_invert(tiny_params, np.ones(3), 0, plan, schedule)
    assert traj.plan_times == plan.ascending and traj.times[0] == 0
    assert traj.eval_times[0] == 1
    _, gen = ddim_generate(tiny_params, np.ones(3), 0, plan, schedule)
    assert gen.plan_times == plan.descending


def test_inversion_gamma_one_equals_raw_conditional(tiny_params, schedule):
    plan = build_step_plan(4, 30, 100)
    a, _ = ddim_invert(tiny_params, np.ones(3), 2, plan, schedule, gamma=1.0)
    b, _ = ddim_invert(lambda z, t, y: predict_eps(tiny_params, z, t, y), np.ones(3), 2, plan, schedule, gamma=1.0)
    assert np.array_equal(a, b)


def test_generation_is_seed_independent_at_eta_zero(tiny_params, schedule):
    plan = build_step_plan(6, 50, 100)
    z = RngStream(3).gaussian((2, 3))
    a, _ = ddim_generate(tiny_params, z, 1, plan, schedule, gamma=3.0, rng=RngStream(1))
    b, _ = ddim_generate(tiny_params, z, 1, plan, schedule, gamma=3.0, rng=RngStream(2))
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        ddim_generate(tiny_params, z, 1, plan, schedule, eta=1.0)


def test_ode_residual_vanishes_on_deterministic_trajectories(tiny_params, schedule):
    plan = build_step_plan(7, 70, 100)
    z0 = RngStream(4).gaussian((3, 3))
    _, inv = ddim_invert(tiny_params, z0, 1, plan, schedule, gamma=2.0)
    _, gen = ddim_generate(tiny_params, inv.final(), 2, plan, schedule, gamma=2.0)
    assert ode_residual_check(tiny_params, inv, schedule) < 1e-10
    assert ode_residual_check(tiny_params, gen, schedule) < 1e-10


def test_ode_residual_hand_built_and_stochastic(schedule):
    const = lambda z, t, y: np.full_like(np.asarray(z, dtype=float), 0.25)
    plan = build_step_plan(2, 30, 100)
    _, traj = ddim_generate(const, np.array([0.5]), 0, plan, schedule)
    assert ode_residual_check(const, traj, schedule) == pytest.approx(0.0, abs=1e-15)
    _, noisy = ddim_generate(const, np.array([0.5]), 0, plan, schedule, eta=1.0, rng=RngStream(0))
    with pytest.raises(TrajectoryError):
        ode_residual_check(const, noisy, schedule)


def test_trajectory_csv_export(tiny_params, schedule, tmp_path):
    plan = build_step_plan(3, 20, 100)
    _, traj = ddim_generate(tiny_params, np.ones(3), 0, plan, schedule)
    trajectory_to_csv(traj, tmp_path / "n.csv")
    trajectory_to_csv(traj, tmp_path / "c.csv", per_coordinate=True)
    norms = list(csv.reader(open(tmp_path / "n.csv")))
    coords = list(csv.reader(open(tmp_path / "c.csv")))
    assert norms[0] == ["t", "norm"] and [int(r[0]) for r in norms[1:]] == [20, 11, 1, 0]
    assert coords[0] == ["t", "z0", "z1", "z2"]
    assert np.allclose([float(v) for v in coords[-1][1:]], traj.final())
