"""Monocular depth estimation by iterative latent denoising under visual
guidance, trained with self-targeted diffusion."""

__version__ = "0.1.0"

from .schedule import (  # noqa: F401
    NoiseSchedule,
    TimestepPlan,
    ddim_step,
    make_linear_schedule,
    make_timestep_plan,
    posterior_mean_variance,
    q_sample,
)
