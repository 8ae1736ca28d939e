"""Noise schedules and DDIM step plans.

Time indices run ``1..T``. ``alpha_bar(0)`` is defined as 1 so the final
reverse step lands exactly on the clean sample.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray = field(repr=False)
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)

    def alpha_bar(self, t):
        """ᾱ_t for integer ``t`` in ``0..T`` (scalar or array)."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise IndexError(f"time index out of range 0..{self.T}: {t}")
        padded = np.concatenate([[1.0], self.alpha_bars])
        out = padded[t]
        return float(out) if out.ndim == 0 else out

    def alpha(self, t: int) -> float:
        self.check_t(t)
        return float(self.alphas[t - 1])

    def beta(self, t: int) -> float:
        self.check_t(t)
        return float(self.betas[t - 1])

    def check_t(self, t) -> None:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise IndexError(f"time index out of range 1..{self.T}: {t}")


def linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 2:
        raise ScheduleError(f"T must be at least 2, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    for arr in (betas, alphas, alpha_bars):
        arr.setflags(write=False)
    return NoiseSchedule(int(T), betas, alphas, alpha_bars)


def ddim_sigma(schedule: NoiseSchedule, tau_prev: int, tau_cur: int, eta: float) -> float:
    """σ_τ(η) for a jump ``tau_cur -> tau_prev`` (``tau_prev`` may be 0)."""
    if tau_prev >= tau_cur:
        raise ScheduleError(f"need tau_prev < tau_cur, got {tau_prev} >= {tau_cur}")
    if eta < 0:
        raise ScheduleError(f"eta must be non-negative, got {eta}")
    schedule.check_t(tau_cur)
    if eta == 0:
        return 0.0
    ab_prev = schedule.alpha_bar(tau_prev)
    ab_cur = schedule.alpha_bar(tau_cur)
    return float(eta * np.sqrt((1 - ab_prev) / (1 - ab_cur)) * np.sqrt(1 - ab_cur / ab_prev))


def ddpm_sigma(schedule: NoiseSchedule, t: int) -> float:
    """Posterior standard deviation of q(x_{t-1} | x_t, x_0); zero at t=1."""
    schedule.check_t(t)
    if t == 1:
        return 0.0
    ab_prev, ab = schedule.alpha_bar(t - 1), schedule.alpha_bar(t)
    return float(np.sqrt((1 - ab_prev) * schedule.beta(t) / (1 - ab)))


@dataclass(frozen=True)
class StepPlan:
    taus: tuple[int, ...]
    t0: int

    def __post_init__(self):
        taus = self.taus
        if len(taus) < 2 or taus[0] != 1 or taus[-1] != self.t0:
            raise ScheduleError(f"plan must run from 1 to t0={self.t0}: {taus}")
        if any(b <= a for a, b in zip(taus, taus[1:])):
            raise ScheduleError(f"plan must be strictly increasing: {taus}")

    def __len__(self) -> int:
        return len(self.taus)

    @property
    def ascending(self) -> list[int]:
        return list(self.taus)

    @property
    def descending(self) -> list[int]:
        return list(reversed(self.taus))


def build_step_plan(T_ddim: int, t0: int, T: int) -> StepPlan:
    """``T_ddim`` evenly spaced integer times in ``[1, t0]``, endpoints exact."""
    if not (2 <= T_ddim and t0 <= T):
        raise ScheduleError(f"need 2 <= T_ddim and t0 <= T, got T_ddim={T_ddim}, t0={t0}, T={T}")
    if T_ddim > t0:
        raise ScheduleError(f"infeasible plan: T_ddim={T_ddim} > t0={t0}")
    grid = np.linspace(1.0, float(t0), T_ddim)
    taus = np.floor(grid + 0.5).astype(np.int64)
    for i in range(1, T_ddim):
        if taus[i] <= taus[i - 1]:
            taus[i] = taus[i - 1] + 1
    # forward bumps never pass t0 since T_ddim <= t0, but pin the end anyway
    taus[-1] = t0
    for i in range(T_ddim - 2, -1, -1):
        if taus[i] >= taus[i + 1]:
            taus[i] = taus[i + 1] - 1
    return StepPlan(tuple(int(t) for t in taus), int(t0))
