"""Sampling and inversion kernels.

Every kernel accepts either a :class:`DenoiserParams` or any callable
``eps_model(z, t, y) -> ε̂`` as the noise predictor, and works on plain
arrays or on :class:`Tensor` values (the latter when differentiating
through a sampling chain).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .denoiser import NULL_LABEL, DenoiserParams, predict_eps
from .numerics import ops
from .numerics.rng import RngStream, gaussian
from .numerics.tensor import Tensor, as_tensor
from .schedule import NoiseSchedule, StepPlan, ddim_sigma, ddpm_sigma


class GuidanceError(ValueError):
    pass


class VarianceError(ValueError):
    pass


class TrajectoryError(ValueError):
    pass


@dataclass(frozen=True)
class GuidanceSpec:
    gamma: float
    y: object

    def __post_init__(self):
        if not np.isfinite(self.gamma) or self.gamma < 0:
            raise GuidanceError(f"guidance scale must be finite and >= 0, got {self.gamma}")


@dataclass
class Trajectory:
    """Visited ``(t, z_t)`` states; ``times[0]`` is the starting time.

    ``eval_times[i]`` is the time at which ε̂ was evaluated for the step
    from state ``i`` to state ``i + 1``.
    """

    times: list[int]
    states: list
    eval_times: list[int]
    plan: StepPlan
    eta: float
    y: object
    gamma: float
    direction: str
    weights: Mapping | None = field(default=None, repr=False)

    @property
    def plan_times(self) -> list[int]:
        return [t for t in self.times if t != 0]

    def final(self):
        return self.states[-1]


def _is_tensor(*xs) -> bool:
    return any(isinstance(x, Tensor) for x in xs)


def _raw_eps(model, z, t, y, weights=None):
    if isinstance(model, DenoiserParams):
        return predict_eps(model, z, t, y, weights=weights)
    return model(z, t, y)


def cfg_eps(params, z_t, t, guidance: GuidanceSpec, weights=None):
    """(1 − γ)·ε̂(z_t, ∅) + γ·ε̂(z_t, y)."""
    y = guidance.y
    if y is None or (np.ndim(y) == 0 and int(y) == NULL_LABEL):
        raise GuidanceError("classifier-free guidance needs a conditional label")
    gamma = guidance.gamma
    if not isinstance(params, DenoiserParams):
        return (1.0 - gamma) * params(z_t, t, None) + gamma * params(z_t, t, y)
    # both branches in one forward pass over a doubled batch
    traced = _is_tensor(z_t) or weights is not None
    single = tuple(z_t.shape) == params.data_shape
    zb = ops.reshape(z_t, (1,) + tuple(z_t.shape)) if single else as_tensor(z_t)
    n = zb.shape[0]
    yy = np.concatenate([np.full(n, NULL_LABEL), np.broadcast_to(np.asarray(y), (n,))])
    both = predict_eps(params, ops.concat([zb, zb], axis=0), t, yy, weights=weights)
    out = (1.0 - gamma) * both[:n] + gamma * both[n:]
    if single:
        out = ops.reshape(out, tuple(z_t.shape))
    return out if traced else out.data


def guided_eps(params, z_t, t, y, gamma: float = 1.0, weights=None):
    """ε̂ with guidance scale ``gamma``; γ = 1 is the plain conditional branch."""
    if gamma == 1.0 or y is None:
        if y is None and gamma != 1.0:
            raise GuidanceError("classifier-free guidance needs a conditional label")
        return _raw_eps(params, z_t, t, y, weights)
    return cfg_eps(params, z_t, t, GuidanceSpec(gamma, y), weights)


def forward_noise(z_0, t: int, schedule: NoiseSchedule, rng: RngStream | None = None, eps=None):
    """z_t = √ᾱ_t z_0 + √(1 − ᾱ_t) ε; returns ``(z_t, eps)``."""
    schedule.check_t(t)
    z_0 = np.asarray(z_0, dtype=np.float64)
    if eps is None:
        eps = gaussian(rng, z_0.shape)
    ab = schedule.alpha_bar(t)
    if np.ndim(ab):
        ab = ab.reshape((-1,) + (1,) * (z_0.ndim - 1))
    return np.sqrt(ab) * z_0 + np.sqrt(1.0 - ab) * eps, eps


def predict_x0(z_t, eps_hat, alpha_bar: float):
    return (z_t - np.sqrt(1.0 - alpha_bar) * eps_hat) * (1.0 / np.sqrt(alpha_bar))


def f_theta(params, z_t, t: int, y, schedule: NoiseSchedule, gamma: float = 1.0, weights=None):
    """One-shot estimate of the clean sample from ``z_t``."""
    schedule.check_t(t)
    eps_hat = guided_eps(params, z_t, t, y, gamma, weights)
    return predict_x0(z_t, eps_hat, schedule.alpha_bar(t))


def ddpm_step(params, z_t, t: int, y, schedule: NoiseSchedule, rng: RngStream | None = None,
              gamma: float = 1.0, eps_hat=None, noise=None):
    """Ancestral step z_t → z_{t−1}; no noise is added on the final step."""
    schedule.check_t(t)
    if eps_hat is None:
        eps_hat = guided_eps(params, z_t, t, y, gamma)
    a, ab = schedule.alpha(t), schedule.alpha_bar(t)
    mean = (z_t - ((1.0 - a) / np.sqrt(1.0 - ab)) * eps_hat) * (1.0 / np.sqrt(a))
    sigma = ddpm_sigma(schedule, t)
    if sigma == 0.0:
        return mean
    if noise is None:
        noise = gaussian(rng, np.shape(mean))
    return mean + sigma * noise


def ddim_step(params, z_cur, tau_cur: int, tau_prev: int, y, eta: float, schedule: NoiseSchedule,
              rng: RngStream | None = None, gamma: float = 1.0, eps_hat=None, weights=None, noise=None):
    """DDIM jump ``tau_cur → tau_prev`` (``tau_prev = 0`` lands on the clean sample)."""
    sigma = ddim_sigma(schedule, tau_prev, tau_cur, eta)
    ab_prev = schedule.alpha_bar(tau_prev)
    if eps_hat is None:
        eps_hat = guided_eps(params, z_cur, tau_cur, y, gamma, weights)
    x0 = predict_x0(z_cur, eps_hat, schedule.alpha_bar(tau_cur))
    rest = 1.0 - ab_prev - sigma * sigma
    if rest < -1e-15:
        raise VarianceError(f"σ² = {sigma * sigma} exceeds 1 − ᾱ_prev = {1.0 - ab_prev}")
    out = np.sqrt(ab_prev) * x0 + np.sqrt(max(rest, 0.0)) * eps_hat
    if sigma == 0.0:
        return out
    if noise is None:
        noise = gaussian(rng, np.shape(out))
    return out + sigma * noise


def ddim_invert_step(params, z_cur, tau_cur: int, tau_next: int, y, schedule: NoiseSchedule,
                     gamma: float = 1.0, weights=None):
    """Deterministic forward jump ``tau_cur → tau_next`` using ε̂(z_cur)."""
    if tau_next <= tau_cur:
        raise ValueError(f"inversion must move forward in time: {tau_cur} -> {tau_next}")
    schedule.check_t(tau_next)
    t_eval = max(tau_cur, 1)
    eps_hat = guided_eps(params, z_cur, t_eval, y, gamma, weights)
    x0 = predict_x0(z_cur, eps_hat, schedule.alpha_bar(tau_cur))
    ab_next = schedule.alpha_bar(tau_next)
    return np.sqrt(ab_next) * x0 + np.sqrt(1.0 - ab_next) * eps_hat


def ddim_invert(params, z_0, y_src, plan: StepPlan, schedule: NoiseSchedule, gamma: float = 1.0,
                weights=None):
    """Deterministic DDIM inversion of ``z_0`` up to ``plan.t0`` under ``y_src``."""
    if plan.t0 > schedule.T:
        raise ValueError(f"t0={plan.t0} exceeds T={schedule.T}")
    times = [0] + plan.ascending
    z = z_0
    states, evals = [z_0], []
    for t_cur, t_next in zip(times[:-1], times[1:]):
        z = ddim_invert_step(params, z, t_cur, t_next, y_src, schedule, gamma, weights)
        states.append(z)
        evals.append(max(t_cur, 1))
    traj = Trajectory(times, states, evals, plan, 0.0, y_src, gamma, "invert", weights)
    return z, traj


def ddim_generate(params, z_t0, y_trg, plan: StepPlan, schedule: NoiseSchedule, gamma: float = 1.0,
                  eta: float = 0.0, rng: RngStream | None = None, weights=None):
    """Conditional DDIM sampling from ``z_{t0}`` down to ``ẑ_0`` along ``plan``."""
    if plan.t0 > schedule.T:
        raise ValueError(f"t0={plan.t0} exceeds T={schedule.T}")
    if eta > 0 and rng is None:
        raise ValueError("stochastic sampling (eta > 0) needs an rng stream")
    times = plan.descending + [0]
    z = z_t0
    states, evals = [z_t0], []
    for t_cur, t_prev in zip(times[:-1], times[1:]):
        z = ddim_step(params, z, t_cur, t_prev, y_trg, eta, schedule, rng, gamma, weights=weights)
        states.append(z)
        evals.append(t_cur)
    traj = Trajectory(times, states, evals, plan, eta, y_trg, gamma, "generate", weights)
    return z, traj


def ddpm_sample(params, shape, y, schedule: NoiseSchedule, rng: RngStream, gamma: float = 1.0):
    """Full T-step ancestral chain from z_T ~ N(0, I)."""
    z = gaussian(rng, shape)
    for t in range(schedule.T, 0, -1):
        z = ddpm_step(params, z, t, y, schedule, rng, gamma)
    return z


def ode_residual_check(params, trajectory: Trajectory, schedule: NoiseSchedule) -> float:
    """Max |Δy − ε̂·Δp| over consecutive states, y = z/√ᾱ_t, p = √(1/ᾱ_t − 1)."""
    if trajectory.eta != 0:
        raise TrajectoryError("ODE residual is defined only for deterministic (eta = 0) trajectories")
    worst = 0.0
    for i, t_e in enumerate(trajectory.eval_times):
        t_a, t_b = trajectory.times[i], trajectory.times[i + 1]
        z_a = _data(trajectory.states[i])
        z_b = _data(trajectory.states[i + 1])
        eps_hat = _data(guided_eps(params, z_a, t_e, trajectory.y, trajectory.gamma))
        ab_a, ab_b = schedule.alpha_bar(t_a), schedule.alpha_bar(t_b)
        y_a, y_b = z_a / np.sqrt(ab_a), z_b / np.sqrt(ab_b)
        p_a, p_b = np.sqrt(1.0 / ab_a - 1.0), np.sqrt(1.0 / ab_b - 1.0)
        worst = max(worst, float(np.max(np.abs((y_b - y_a) - (p_b - p_a) * eps_hat))))
    return worst


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def trajectory_to_csv(traj: Trajectory, path, per_coordinate: bool = False) -> None:
    """Write ``t`` plus either the L2 norm or every coordinate of each state."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        first = _data(traj.states[0]).ravel()
        if per_coordinate:
            w.writerow(["t"] + [f"z{i}" for i in range(first.size)])
        else:
            w.writerow(["t", "norm"])
        for t, z in zip(traj.times, traj.states):
            flat = _data(z).ravel()
            if per_coordinate:
                w.writerow([t] + [repr(float(v)) for v in flat])
            else:
                w.writerow([t, repr(float(np.linalg.norm(flat)))])


EpsModel = Callable[[np.ndarray, int, object], np.ndarray]
