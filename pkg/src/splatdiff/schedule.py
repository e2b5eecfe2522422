"""Noise schedule and closed-form DDPM/DDIM state transitions.

Steps are indexed ``t = 1..T`` with ``alpha_bar(0) = 1`` reserved for the
clean state; that convention makes the posterior-mean coefficients and the
t = 1 terminal step come out of the same formulas without special cases.
These functions are shape-agnostic and value-range-agnostic: callers that
diffuse images are expected to work in the mean-shifted [-1, 1] domain and
convert at the boundary.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "NoiseSchedule",
    "make_linear_schedule",
    "forward_diffuse",
    "one_step_x0",
    "posterior_mean",
    "ddpm_step",
    "ddim_step",
    "ddim_timesteps",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise rates and cumulative signal fractions.

    ``betas[t-1]`` is the noise rate at step t.  ``alpha_bars`` has length
    T+1 with a leading 1.0 so ``alpha_bars[t]`` is valid for t = 0..T.
    """

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def check_step(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"step t={t} outside valid range [1, {self.T}]")

    def beta(self, t: int) -> float:
        self.check_step(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self.check_step(t)
        return float(self.alphas[t - 1])

    def abar(self, t: int) -> float:
        if not 0 <= t <= self.T:
            raise ValueError(f"t={t} outside valid range [0, {self.T}]")
        return float(self.alpha_bars[t])

    def posterior_variance(self, t: int) -> float:
        """Var[x_{t-1} | x_t, x0].  Exactly zero at t = 1."""
        self.check_step(t)
        ab_prev = self.alpha_bars[t - 1]
        ab = self.alpha_bars[t]
        return float((1.0 - ab_prev) / (1.0 - ab) * (1.0 - self.alphas[t - 1]))


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linearly spaced betas over T steps with derived alpha tables."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.concatenate([[1.0], np.cumprod(alphas)])
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def forward_diffuse(x0, eps, t: int, sched: NoiseSchedule):
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    sched.check_step(t)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    ab = sched.alpha_bars[t]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def one_step_x0(xt, eps_hat, t: int, sched: NoiseSchedule):
    """Invert the forward map for a given noise estimate:
    x0 = (x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)."""
    sched.check_step(t)
    xt = np.asarray(xt, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    ab = sched.alpha_bars[t]
    return (xt - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def posterior_mean(xt, x0_est, t: int, sched: NoiseSchedule):
    """Mean of x_{t-1} given x_t and an x0 estimate.

    coef_xt = sqrt(alpha_t) (1 - abar_{t-1}) / (1 - abar_t)
    coef_x0 = sqrt(abar_{t-1}) beta_t / (1 - abar_t)
    At t = 1 this returns x0_est exactly (coef_xt = 0, coef_x0 = 1).
    """
    sched.check_step(t)
    xt = np.asarray(xt, dtype=np.float64)
    x0_est = np.asarray(x0_est, dtype=np.float64)
    if t == 1:
        # coef_xt = 0 and coef_x0 = beta_1/(1 - abar_1) = 1; evaluating the
        # quotient in floats loses the last bits to cancellation, so return
        # the exact limit instead.
        return x0_est.copy()
    ab = sched.alpha_bars[t]
    ab_prev = sched.alpha_bars[t - 1]
    beta = sched.betas[t - 1]
    alpha = sched.alphas[t - 1]
    coef_xt = np.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab)
    coef_x0 = np.sqrt(ab_prev) * beta / (1.0 - ab)
    return coef_xt * xt + coef_x0 * x0_est


def ddpm_step(xt, x0_est, t: int, sched: NoiseSchedule, rng: np.random.Generator):
    """Sample x_{t-1} ~ N(posterior_mean, posterior_variance I)."""
    mean = posterior_mean(xt, x0_est, t, sched)
    var = sched.posterior_variance(t)
    if var == 0.0:
        return mean
    return mean + np.sqrt(var) * rng.standard_normal(mean.shape)


def ddim_step(xt, x0_est, t: int, t_prev: int, sched: NoiseSchedule):
    """Deterministic (eta = 0) reverse jump t -> t_prev.

    The implied noise direction is re-derived from (x_t, x0_est) so the update
    stays exact when x0_est comes from a clamped or refined source rather than
    the raw noise prediction.
    """
    sched.check_step(t)
    if not 0 <= t_prev < t:
        raise ValueError(f"need 0 <= t_prev < t, got t_prev={t_prev}, t={t}")
    xt = np.asarray(xt, dtype=np.float64)
    x0_est = np.asarray(x0_est, dtype=np.float64)
    ab = sched.alpha_bars[t]
    ab_prev = sched.alpha_bars[t_prev]
    eps_implied = (xt - np.sqrt(ab) * x0_est) / np.sqrt(1.0 - ab)
    return np.sqrt(ab_prev) * x0_est + np.sqrt(1.0 - ab_prev) * eps_implied


def ddim_timesteps(T: int, n_steps: int) -> list[tuple[int, int]]:
    """Uniform-stride (t, t_prev) pairs from T down to 0.

    T=1000, n_steps=50 gives (1000, 980), (980, 960), ..., (20, 0).
    """
    if not 1 <= n_steps <= T:
        raise ValueError(f"need 1 <= n_steps <= T, got n_steps={n_steps}, T={T}")
    ts = np.unique(np.round(np.linspace(0, T, n_steps + 1)).astype(int))[::-1]
    return [(int(a), int(b)) for a, b in zip(ts[:-1], ts[1:])]
