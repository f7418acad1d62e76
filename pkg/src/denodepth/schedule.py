"""Closed-form diffusion math: variance schedules, forward noising, the
Bayes posterior over one reverse step, and the deterministic (zero
transition variance) reverse update.

Conventions: timesteps are integers 1..T for the noisy chain, with t = 0
the clean signal. ``alpha_bars[0] == 1`` so every formula degenerates
correctly at the boundary. All tables are float64; the tensor operations
below are dtype-agnostic (they work on scalars, numpy arrays, and torch
tensors alike, since the schedule coefficients enter as python floats).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed beta/alpha/alpha-bar tables for a T-step chain.

    ``betas[i]`` is the variance injected at step i+1 (i.e. beta_{i+1}),
    ``alpha_bars[t]`` is the cumulative signal coefficient at step t with
    ``alpha_bars[0] == 1``.
    """

    t_train: int
    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.shape[0] != self.t_train:
            raise ValueError("betas must be a 1-D array of length t_train")
        if self.t_train < 1:
            raise ValueError(f"t_train must be >= 1, got {self.t_train}")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ValueError("every beta must lie strictly inside (0, 1)")
        alphas = 1.0 - betas
        alpha_bars = np.concatenate([[1.0], np.cumprod(alphas)])
        for arr in (betas, alphas, alpha_bars):
            arr.flags.writeable = False
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    def beta(self, t: int) -> float:
        self._check_t(t, low=1)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check_t(t, low=1)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        self._check_t(t, low=0)
        return float(self.alpha_bars[t])

    def _check_t(self, t: int, low: int):
        if not (low <= t <= self.t_train):
            raise ValueError(f"timestep {t} outside [{low}, {self.t_train}]")


@dataclass(frozen=True)
class TimestepPlan:
    """Strictly decreasing inference timesteps, terminated by 0."""

    steps: tuple

    def __post_init__(self):
        steps = tuple(int(s) for s in self.steps)
        if len(steps) < 2:
            raise ValueError("a plan needs at least one step plus the terminal 0")
        if steps[-1] != 0:
            raise ValueError("the last plan entry must be 0")
        if any(a <= b for a, b in zip(steps, steps[1:])):
            raise ValueError("plan steps must strictly decrease")
        if steps[-2] < 1:
            raise ValueError("all non-terminal steps must be >= 1")
        object.__setattr__(self, "steps", steps)

    @property
    def k(self) -> int:
        """Number of denoising transitions (excludes the terminal 0)."""
        return len(self.steps) - 1

    def pairs(self):
        """Consecutive (t, t_prev) transitions, highest t first."""
        return list(zip(self.steps[:-1], self.steps[1:]))


def make_linear_schedule(t_train: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linearly spaced betas inclusive of both endpoints."""
    if t_train < 1:
        raise ValueError(f"t_train must be >= 1, got {t_train}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    betas = np.linspace(beta_start, beta_end, t_train, dtype=np.float64)
    return NoiseSchedule(t_train=t_train, betas=betas)


def make_timestep_plan(t_train: int, k: int) -> TimestepPlan:
    """Uniform-stride plan: stride = floor(T/k), steps [k*stride .. stride, 0]."""
    if not (1 <= k <= t_train):
        raise ValueError(f"need 1 <= k <= t_train, got k={k}, t_train={t_train}")
    stride = t_train // k
    steps = [stride * i for i in range(k, 0, -1)] + [0]
    return TimestepPlan(steps=tuple(steps))


def q_sample(x0, t: int, eps, sched: NoiseSchedule):
    """Forward diffusion at an arbitrary step: sqrt(ab_t)*x0 + sqrt(1-ab_t)*eps."""
    if not (0 <= t <= sched.t_train):
        raise ValueError(f"timestep {t} outside [0, {sched.t_train}]")
    if np.shape(x0) != np.shape(eps):
        raise ValueError(f"shape mismatch: x0 {np.shape(x0)} vs eps {np.shape(eps)}")
    ab = sched.alpha_bar(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def posterior_mean_variance(x0, xt, t: int, sched: NoiseSchedule):
    """Mean and variance of the Gaussian posterior over x_{t-1} given (x_t, x_0).

    mean = sqrt(ab_{t-1}) * beta_t / (1 - ab_t) * x0
         + sqrt(alpha_t) * (1 - ab_{t-1}) / (1 - ab_t) * xt
    var  = (1 - ab_{t-1}) / (1 - ab_t) * beta_t
    """
    if not (1 <= t <= sched.t_train):
        raise ValueError(f"timestep {t} outside [1, {sched.t_train}]")
    if t == 1:
        # ab_0 == 1 collapses the xt coefficient and the variance to exactly 0.
        return x0 * 1.0, 0.0
    ab_t = sched.alpha_bar(t)
    ab_prev = sched.alpha_bar(t - 1)
    beta_t = sched.beta(t)
    alpha_t = sched.alpha(t)
    coef_x0 = math.sqrt(ab_prev) * beta_t / (1.0 - ab_t)
    coef_xt = math.sqrt(alpha_t) * (1.0 - ab_prev) / (1.0 - ab_t)
    variance = (1.0 - ab_prev) / (1.0 - ab_t) * beta_t
    return coef_x0 * x0 + coef_xt * xt, variance


def ddim_step(xt, x0_hat, t: int, t_prev: int, sched: NoiseSchedule):
    """Deterministic reverse update from the predicted clean signal.

    Recovers eps_hat = (xt - sqrt(ab_t)*x0_hat) / sqrt(1 - ab_t) and re-noises
    the prediction to level t_prev with that same noise estimate. t_prev = 0
    returns x0_hat.
    """
    if not (1 <= t <= sched.t_train):
        raise ValueError(f"timestep {t} outside [1, {sched.t_train}]")
    if not (0 <= t_prev < t):
        raise ValueError(f"need 0 <= t_prev < t, got t_prev={t_prev}, t={t}")
    ab_t = sched.alpha_bar(t)
    ab_prev = sched.alpha_bar(t_prev)
    eps_hat = (xt - math.sqrt(ab_t) * x0_hat) / math.sqrt(1.0 - ab_t)
    return math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev) * eps_hat
