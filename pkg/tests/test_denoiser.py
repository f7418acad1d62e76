import math

import pytest
import torch

from helpers import fd_gradient, rel_error
from denodepth.denoiser import DenoiserModel, SelfAttention2d, predict_x0, time_embedding


# time embedding -------------------------------------------------------------

def test_time_embedding_t0_alternates():
    emb = time_embedding(0, 8)
    assert torch.equal(emb, torch.tensor([0.0, 1.0] * 4))


def test_time_embedding_bounded():
    for t in (1, 57, 999):
        emb = time_embedding(t, 32)
        assert float(emb.abs().max()) <= 1.0


def test_time_embedding_golden_values():
    emb = time_embedding(1, 4)
    want = [math.sin(1.0), math.cos(1.0),
            math.sin(10000.0 ** -0.5), math.cos(10000.0 ** -0.5)]
    assert emb.tolist() == pytest.approx(want, rel=1e-6)


def test_time_embedding_batched():
    batched = time_embedding(torch.tensor([0, 1, 5]), 16)
    assert batched.shape == (3, 16)
    assert torch.equal(batched[1], time_embedding(1, 16))


def test_time_embedding_rejects_odd_dim_and_negative_t():
    with pytest.raises(ValueError):
        time_embedding(1, 5)
    with pytest.raises(ValueError):
        time_embedding(-1, 4)


# denoiser block -------------------------------------------------------------

@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return DenoiserModel(latent_dim=16, cond_dim=64, time_dim=32, t_max=1000)


def test_output_shape(model):
    xt = torch.randn(1, 16, 16, 24)
    cond = torch.randn(1, 64, 8, 12)
    assert model(xt, 500, cond).shape == (1, 16, 16, 24)


def test_condition_sensitivity(model):
    gen = torch.Generator().manual_seed(1)
    xt = torch.randn(1, 16, 8, 8, generator=gen)
    cond = torch.randn(1, 64, 4, 4, generator=gen)
    base = model(xt, 100, cond)
    moved = model(xt, 100, cond + torch.randn(1, 64, 4, 4, generator=gen))
    assert float((base - moved).detach().abs().max()) > 0.0


def test_time_sensitivity(model):
    gen = torch.Generator().manual_seed(2)
    xt = torch.randn(1, 16, 8, 8, generator=gen)
    cond = torch.randn(1, 64, 4, 4, generator=gen)
    assert not torch.allclose(model(xt, 1, cond), model(xt, 1000, cond))


def test_determinism(model):
    gen = torch.Generator().manual_seed(3)
    xt = torch.randn(2, 16, 8, 8, generator=gen)
    cond = torch.randn(2, 64, 4, 4, generator=gen)
    assert torch.equal(model(xt, 7, cond), model(xt, 7, cond))


def test_shape_and_range_validation(model):
    xt = torch.randn(1, 16, 8, 8)
    with pytest.raises(ValueError):
        model(xt, 100, torch.randn(1, 64, 4, 5))
    with pytest.raises(ValueError):
        model(xt, 0, torch.randn(1, 64, 4, 4))
    with pytest.raises(ValueError):
        model(xt, 1001, torch.randn(1, 64, 4, 4))
    with pytest.raises(ValueError):
        model(xt, 5, torch.randn(1, 32, 4, 4))


def test_attention_rows_are_stochastic():
    torch.manual_seed(4)
    attn = SelfAttention2d(8)
    x = torch.randn(2, 8, 5, 6)
    weights = attn.attention_weights(x).detach()
    assert weights.shape == (2, 30, 30)
    sums = weights.sum(dim=-1)
    assert float((sums - 1.0).abs().max()) < 1e-6


def test_windowed_attention_matches_full_on_single_window():
    torch.manual_seed(9)
    full = SelfAttention2d(8, window=0)
    windowed = SelfAttention2d(8, window=4)
    windowed.load_state_dict(full.state_dict())
    x = torch.randn(2, 8, 4, 4)
    assert torch.allclose(full(x), windowed(x), atol=1e-6)


def test_windowed_attention_rows_stochastic_and_local():
    torch.manual_seed(10)
    attn = SelfAttention2d(8, window=2)
    x = torch.randn(1, 8, 4, 6)
    weights = attn.attention_weights(x).detach()
    assert weights.shape == (6, 4, 4)  # 6 windows of 2x2 tokens
    assert float((weights.sum(dim=-1) - 1.0).abs().max()) < 1e-6
    with pytest.raises(ValueError):
        attn(torch.randn(1, 8, 5, 6))


def test_residual_identity_at_initialization():
    torch.manual_seed(5)
    model = DenoiserModel(latent_dim=8, cond_dim=16, time_dim=16, t_max=100)
    assert torch.count_nonzero(model.refine_scale) == 0
    xt = torch.randn(1, 8, 8, 8)
    cond = torch.randn(1, 16, 4, 4)
    assert torch.equal(model(xt, 3, cond), model.fused_features(xt, 3, cond))


def test_per_sample_timesteps(model):
    gen = torch.Generator().manual_seed(6)
    xt = torch.randn(2, 16, 8, 8, generator=gen)
    cond = torch.randn(2, 64, 4, 4, generator=gen)
    mixed = model(xt, torch.tensor([3, 900]), cond)
    first = model(xt[:1], 3, cond[:1])
    assert torch.allclose(mixed[0], first[0], atol=1e-6)


def test_gradients_match_finite_differences():
    torch.manual_seed(7)
    model = DenoiserModel(latent_dim=4, cond_dim=8, time_dim=8, t_max=50).double()
    xt0 = torch.randn(1, 4, 4, 4, dtype=torch.float64)
    cond0 = torch.randn(1, 8, 2, 2, dtype=torch.float64)

    xt = xt0.clone().requires_grad_(True)
    cond = cond0.clone().requires_grad_(True)
    model(xt, 11, cond).mean().backward()
    assert float(xt.grad.abs().max()) > 0
    assert float(cond.grad.abs().max()) > 0

    fd_xt = fd_gradient(lambda z: model(z, 11, cond0).mean(), xt0)
    assert rel_error(xt.grad, fd_xt) < 1e-3
    fd_cond = fd_gradient(lambda c: model(xt0, 11, c).mean(), cond0)
    assert rel_error(cond.grad, fd_cond) < 1e-3


def test_parameter_gradients_match_finite_differences():
    torch.manual_seed(8)
    model = DenoiserModel(latent_dim=4, cond_dim=8, time_dim=8, t_max=50).double()
    xt = torch.randn(1, 4, 4, 4, dtype=torch.float64)
    cond = torch.randn(1, 8, 2, 2, dtype=torch.float64)

    model.zero_grad()
    model(xt, 9, cond).mean().backward()
    for name in ("refine_scale", "local_proj.bias", "attn.qkv.bias", "time_mlp.2.bias"):
        param = dict(model.named_parameters())[name]
        assert param.grad is not None and float(param.grad.abs().max()) > 0, name

        original = param.detach().clone()

        def f(values, p=param, orig=original):
            with torch.no_grad():
                p.copy_(values)
            out = model(xt, 9, cond).mean()
            with torch.no_grad():
                p.copy_(orig)
            return out

        fd = fd_gradient(f, original)
        assert rel_error(param.grad, fd) < 1e-3, name


def test_predict_x0_alias(model):
    xt = torch.randn(1, 16, 8, 8)
    cond = torch.randn(1, 64, 4, 4)
    assert torch.equal(predict_x0(xt, 5, cond, model), model(xt, 5, cond))
