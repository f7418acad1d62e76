"""The conditioned denoising block: predicts the clean depth latent from
the current noisy latent, the timestep, and the visual condition.

Structure: a local projection upsamples the condition to latent resolution,
fusion is elementwise summation followed by a conv block (with a timestep
scale/shift) and full spatial self-attention; a refinement branch
(bottleneck conv + channel gate + output head) is added back through a
zero-initialized per-channel scale, so the block is the identity over the
fused features at initialization.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def time_embedding(t, dim: int) -> torch.Tensor:
    """Sinusoidal embedding with interleaved (sin, cos) pairs.

    Element 2i is sin(t * w_i) and element 2i+1 is cos(t * w_i) with
    w_i = 10000**(-2i/dim). Accepts an int (returns shape (dim,)) or a 1-D
    tensor of timesteps (returns shape (B, dim)).
    """
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    scalar = not torch.is_tensor(t)
    tt = torch.as_tensor(t, dtype=torch.float64).reshape(-1, 1)
    if (tt < 0).any():
        raise ValueError("timesteps must be non-negative")
    i = torch.arange(dim // 2, dtype=torch.float64)
    omega = torch.pow(10000.0, -2.0 * i / dim)
    ang = tt * omega
    emb = torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1).reshape(-1, dim)
    emb = emb.to(torch.float32)
    return emb[0] if scalar else emb


class SelfAttention2d(nn.Module):
    """Single-head self-attention over the spatial grid, residual.

    ``window = 0`` attends over the full grid; a positive window partitions
    the grid into window x window blocks and attends within each block
    (for latents too large for full attention).
    """

    def __init__(self, channels: int, window: int = 0):
        super().__init__()
        self.channels = channels
        self.window = window
        self.norm = nn.GroupNorm(num_groups=min(8, channels), num_channels=channels)
        self.qkv = nn.Linear(channels, 3 * channels)
        self.proj = nn.Linear(channels, channels)

    def attention_weights(self, x: torch.Tensor) -> torch.Tensor:
        """Row-stochastic attention matrix per (windowed) token group."""
        _, w = self._attend(x)
        return w

    def _attend(self, x: torch.Tensor):
        b, c, h, w = x.shape
        tokens = self.norm(x)
        if self.window:
            ws = self.window
            if h % ws or w % ws:
                raise ValueError(
                    f"latent grid ({h}, {w}) is not divisible by the "
                    f"attention window {ws}"
                )
            tokens = tokens.reshape(b, c, h // ws, ws, w // ws, ws)
            tokens = tokens.permute(0, 2, 4, 3, 5, 1).reshape(-1, ws * ws, c)
        else:
            tokens = tokens.flatten(2).transpose(1, 2)  # (B, N, C)
        q, k, v = self.qkv(tokens).chunk(3, dim=-1)
        logits = q @ k.transpose(1, 2) / math.sqrt(c)
        weights = torch.softmax(logits, dim=-1)
        out = self.proj(weights @ v)
        if self.window:
            ws = self.window
            out = out.reshape(b, h // ws, w // ws, ws, ws, c)
            out = out.permute(0, 5, 1, 3, 2, 4).reshape(b, c, h, w)
        else:
            out = out.transpose(1, 2).reshape(b, c, h, w)
        return out, weights

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out, _ = self._attend(x)
        return x + out


class ChannelGate(nn.Module):
    """Channel-wise attention: global average pool -> 2-layer sigmoid gate."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(channels // reduction, 4)
        self.fc = nn.Sequential(
            nn.Linear(channels, hidden),
            nn.SiLU(),
            nn.Linear(hidden, channels),
            nn.Sigmoid(),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        gate = self.fc(x.mean(dim=(2, 3)))
        return x * gate[:, :, None, None]


class _Bottleneck(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        mid = max(channels // 2, 4)
        self.body = nn.Sequential(
            nn.Conv2d(channels, mid, kernel_size=1),
            nn.SiLU(),
            nn.Conv2d(mid, mid, kernel_size=3, padding=1),
            nn.SiLU(),
            nn.Conv2d(mid, channels, kernel_size=1),
        )

    def forward(self, x):
        return self.body(x)


class DenoiserModel(nn.Module):
    """Clean-latent predictor over (x_t, t, condition)."""

    def __init__(self, latent_dim: int = 16, cond_dim: int = 64,
                 time_dim: int = 64, t_max: int = 1000, attn_window: int = 0):
        super().__init__()
        self.latent_dim = latent_dim
        self.cond_dim = cond_dim
        self.time_dim = time_dim
        self.t_max = t_max

        # Local projection: nearest x2 upsample then 3x3 conv to d channels.
        self.local_proj = nn.Conv2d(cond_dim, latent_dim, kernel_size=3, padding=1)
        self.fuse = nn.Sequential(
            nn.Conv2d(latent_dim, latent_dim, kernel_size=3, padding=1),
            nn.GroupNorm(num_groups=min(8, latent_dim), num_channels=latent_dim),
            nn.SiLU(),
            nn.Conv2d(latent_dim, latent_dim, kernel_size=3, padding=1),
        )
        self.time_mlp = nn.Sequential(
            nn.Linear(time_dim, time_dim),
            nn.SiLU(),
            nn.Linear(time_dim, 2 * latent_dim),
        )
        self.attn = SelfAttention2d(latent_dim, window=attn_window)
        self.bottleneck = _Bottleneck(latent_dim)
        self.channel_gate = ChannelGate(latent_dim)
        self.head = nn.Conv2d(latent_dim, latent_dim, kernel_size=3, padding=1)
        # Zero scale makes the refinement branch vanish at initialization.
        self.refine_scale = nn.Parameter(torch.zeros(latent_dim))

    def fused_features(self, xt: torch.Tensor, t, cond: torch.Tensor) -> torch.Tensor:
        """Fusion-block output: projection + sum + conv + time shift + attention."""
        self._check_inputs(xt, t, cond)
        proj = self.local_proj(F.interpolate(cond, scale_factor=2, mode="nearest"))
        h = self.fuse(xt + proj)
        temb = time_embedding(t, self.time_dim).to(xt.dtype)
        if temb.dim() == 1:
            temb = temb[None].expand(xt.shape[0], -1)
        scale, shift = self.time_mlp(temb).chunk(2, dim=-1)
        h = h * (1.0 + scale[:, :, None, None]) + shift[:, :, None, None]
        return self.attn(h)

    def forward(self, xt: torch.Tensor, t, cond: torch.Tensor) -> torch.Tensor:
        h = self.fused_features(xt, t, cond)
        r = self.head(self.channel_gate(self.bottleneck(h)))
        return h + self.refine_scale[None, :, None, None] * r

    def _check_inputs(self, xt, t, cond):
        if xt.dim() != 4 or cond.dim() != 4:
            raise ValueError("latent and condition must be batched (B, C, H, W) tensors")
        if xt.shape[1] != self.latent_dim:
            raise ValueError(f"latent has {xt.shape[1]} channels, expected {self.latent_dim}")
        if cond.shape[1] != self.cond_dim:
            raise ValueError(f"condition has {cond.shape[1]} channels, expected {self.cond_dim}")
        want = (xt.shape[-2] // 2, xt.shape[-1] // 2)
        if tuple(cond.shape[-2:]) != want:
            raise ValueError(
                f"condition grid {tuple(cond.shape[-2:])} will not upsample onto "
                f"latent grid {tuple(xt.shape[-2:])}"
            )
        ts = torch.as_tensor(t).reshape(-1)
        if ((ts < 1) | (ts > self.t_max)).any():
            raise ValueError(f"timestep(s) {t} outside [1, {self.t_max}]")


def predict_x0(xt: torch.Tensor, t, cond: torch.Tensor, model: DenoiserModel) -> torch.Tensor:
    """Functional alias for model(xt, t, cond)."""
    return model(xt, t, cond)
