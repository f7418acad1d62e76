import math

import numpy as np
import pytest
import torch

from denodepth.schedule import (
    NoiseSchedule,
    TimestepPlan,
    ddim_step,
    make_linear_schedule,
    make_timestep_plan,
    posterior_mean_variance,
    q_sample,
)

# Product of (1 - beta_s) over the default 1000-step linear table, computed
# once with mpmath at 60 significant digits and frozen here.
GOLDEN_ALPHA_BAR_1000 = 4.035829765375685e-05


@pytest.fixture(scope="module")
def sched():
    return make_linear_schedule(1000, 1e-4, 0.02)


def test_linear_endpoints(sched):
    assert sched.betas[0] == 1e-4
    assert sched.betas[-1] == 0.02
    assert sched.alpha_bars[0] == 1.0
    assert sched.alpha_bars[1] == pytest.approx(0.9999, abs=0.0)


def test_alpha_bar_golden_product(sched):
    got = sched.alpha_bar(1000)
    assert abs(got - GOLDEN_ALPHA_BAR_1000) / GOLDEN_ALPHA_BAR_1000 < 1e-12


def test_alpha_bar_matches_iterative_product(sched):
    prod = 1.0
    for t in range(1, sched.t_train + 1):
        prod *= 1.0 - sched.beta(t)
        assert abs(sched.alpha_bar(t) - prod) / prod < 1e-10


def test_alpha_bar_strictly_decreasing(sched):
    bars = sched.alpha_bars
    assert np.all(np.diff(bars) < 0)
    assert 0.0 < bars[-1] < bars[1] < 1.0


def test_schedule_rejects_bad_inputs():
    with pytest.raises(ValueError):
        make_linear_schedule(0, 1e-4, 0.02)
    with pytest.raises(ValueError):
        make_linear_schedule(10, 0.0, 0.02)
    with pytest.raises(ValueError):
        make_linear_schedule(10, 0.1, 1.0)
    with pytest.raises(ValueError):
        make_linear_schedule(10, 0.5, 0.4)
    with pytest.raises(ValueError):
        NoiseSchedule(t_train=3, betas=np.array([0.1, 1.5, 0.1]))


def test_schedule_tables_are_immutable(sched):
    with pytest.raises(ValueError):
        sched.betas[0] = 0.5


# q_sample -------------------------------------------------------------------

def test_q_sample_noise_free(sched):
    x0 = torch.randn(3, 5)
    out = q_sample(x0, 400, torch.zeros_like(x0), sched)
    expected = math.sqrt(sched.alpha_bar(400)) * x0
    assert torch.equal(out, expected)


def test_q_sample_t0_identity(sched):
    x0 = torch.randn(4, 4)
    eps = torch.randn(4, 4)
    assert torch.equal(q_sample(x0, 0, eps, sched), x0)


def test_q_sample_scalar_golden():
    # ab_1 = 0.81, ab_2 = 0.25 by direct construction.
    sched = NoiseSchedule(t_train=2, betas=np.array([0.19, 1.0 - 0.25 / 0.81]))
    assert sched.alpha_bar(2) == pytest.approx(0.25, rel=1e-14)
    got = q_sample(1.0, 2, 1.0, sched)
    assert got == pytest.approx(1.3660254037844386, rel=1e-12)


def test_q_sample_linear_in_both_arguments(sched):
    x0 = torch.randn(6)
    eps = torch.randn(6)
    a = q_sample(2.0 * x0, 100, eps, sched) - q_sample(torch.zeros(6), 100, eps, sched)
    b = 2.0 * (q_sample(x0, 100, eps, sched) - q_sample(torch.zeros(6), 100, eps, sched))
    assert torch.allclose(a, b, rtol=1e-6, atol=1e-7)


def test_q_sample_rejects_bad_t_and_shapes(sched):
    x = torch.zeros(2, 2)
    with pytest.raises(ValueError):
        q_sample(x, -1, x, sched)
    with pytest.raises(ValueError):
        q_sample(x, 1001, x, sched)
    with pytest.raises(ValueError):
        q_sample(x, 5, torch.zeros(3, 2), sched)


# posterior ------------------------------------------------------------------

def test_posterior_t1_boundary_exact(sched):
    x0 = torch.randn(3, 3)
    xt = torch.randn(3, 3)
    mean, var = posterior_mean_variance(x0, xt, 1, sched)
    assert torch.equal(mean, x0)
    assert var == 0.0


def test_posterior_zero_inputs(sched):
    zeros = torch.zeros(2, 2)
    mean, _ = posterior_mean_variance(zeros, zeros, 37, sched)
    assert torch.equal(mean, zeros)


def test_posterior_scalar_golden():
    # ab_1 = 0.9, ab_2 = 0.8, alpha_2 = 8/9, beta_2 = 1/9.
    sched = NoiseSchedule(t_train=2, betas=np.array([0.1, 1.0 - 0.8 / 0.9]))
    mean, var = posterior_mean_variance(1.0, 2.0, 2, sched)
    assert mean == pytest.approx(1.4698553182767928, rel=1e-12)
    assert var == pytest.approx(0.05555555555555555, rel=1e-10)


def test_posterior_variance_bounded_by_beta(sched):
    for t in range(1, sched.t_train + 1, 7):
        _, var = posterior_mean_variance(0.0, 0.0, t, sched)
        assert 0.0 <= var <= sched.beta(t)


def test_posterior_rejects_t0(sched):
    with pytest.raises(ValueError):
        posterior_mean_variance(0.0, 0.0, 0, sched)


# ddim_step ------------------------------------------------------------------

def test_ddim_terminal_returns_prediction(sched):
    xt = torch.randn(2, 3)
    x0_hat = torch.randn(2, 3)
    out = ddim_step(xt, x0_hat, 50, 0, sched)
    assert torch.equal(out, x0_hat)


def test_ddim_scalar_golden():
    sched = NoiseSchedule(t_train=2, betas=np.array([0.19, 1.0 - 0.25 / 0.81]))
    got = ddim_step(1.36603, 1.0, 2, 1, sched)
    assert got == pytest.approx(1.3358922077318351, rel=1e-10)


def test_ddim_noise_preservation_property(sched):
    rng = np.random.default_rng(11)
    gen = torch.Generator().manual_seed(11)
    for _ in range(1000):
        t = int(rng.integers(2, sched.t_train + 1))
        t_prev = int(rng.integers(0, t))
        x0 = torch.randn(4, generator=gen, dtype=torch.float64)
        eps = torch.randn(4, generator=gen, dtype=torch.float64)
        xt = q_sample(x0, t, eps, sched)
        got = ddim_step(xt, x0, t, t_prev, sched)
        want = q_sample(x0, t_prev, eps, sched)
        scale = float(want.abs().max()) + 1e-12
        assert float((got - want).abs().max()) / scale < 1e-6


def test_ddim_rejects_bad_timesteps(sched):
    x = torch.zeros(2)
    with pytest.raises(ValueError):
        ddim_step(x, x, 10, 10, sched)
    with pytest.raises(ValueError):
        ddim_step(x, x, 10, 11, sched)
    with pytest.raises(ValueError):
        ddim_step(x, x, 0, 0, sched)


# timestep plans -------------------------------------------------------------

def test_plan_stride_20_of_1000():
    plan = make_timestep_plan(1000, 20)
    assert plan.steps == tuple(range(1000, 0, -50)) + (0,)
    assert plan.k == 20


def test_plan_full_chain():
    plan = make_timestep_plan(10, 10)
    assert plan.steps == (10, 9, 8, 7, 6, 5, 4, 3, 2, 1, 0)


def test_plan_floor_stride():
    assert make_timestep_plan(1000, 3).steps == (999, 666, 333, 0)


def test_plan_rejects_bad_k():
    with pytest.raises(ValueError):
        make_timestep_plan(10, 11)
    with pytest.raises(ValueError):
        make_timestep_plan(10, 0)


def test_plan_invariants_enforced():
    with pytest.raises(ValueError):
        TimestepPlan(steps=(5, 5, 0))
    with pytest.raises(ValueError):
        TimestepPlan(steps=(5, 3, 1))


def test_chained_oracle_convergence(sched):
    # A denoiser that always answers with the true clean signal drives any
    # start to exactly that signal at the terminal step.
    x0 = torch.randn(3, 4, dtype=torch.float64)
    for k in (2, 5, 20):
        plan = make_timestep_plan(sched.t_train, k)
        x = torch.randn(3, 4, dtype=torch.float64)
        for t, t_prev in plan.pairs():
            x = ddim_step(x, x0, t, t_prev, sched)
        assert torch.equal(x, x0)
