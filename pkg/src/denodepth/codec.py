"""Depth latent space: encode ground-truth depth into the latent grid,
decode refined latents back to metric depth through the reciprocal-sigmoid
output mapping, and pool validity masks down to latent resolution.

Latents are channel-first torch tensors shaped (B, d, H/2, W/2); decoded
depth is (B, H, W) in metres.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn


def depth_from_activation(s, cap: float):
    """Map a sigmoid activation in (0, 1) to metric depth in (0, cap - 1].

    depth = min(1/s, cap) - 1. Strictly decreasing in s until the clamp
    engages. Works elementwise on tensors; scalar inputs are range-checked.
    """
    if cap <= 1.0:
        raise ValueError(f"cap must exceed 1, got {cap}")
    if isinstance(s, (int, float)):
        if not (0.0 < s < 1.0):
            raise ValueError(f"activation must lie in (0, 1), got {s}")
        return min(1.0 / float(s), float(cap)) - 1.0
    return torch.clamp(1.0 / s, max=cap) - 1.0


def downsample_mask(mask, factor: int):
    """Any-pooling: a coarse cell is valid iff any covered fine pixel is.

    Accepts a (H, W) or (B, H, W) boolean numpy array or torch tensor and
    returns the same kind at 1/factor resolution.
    """
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    h, w = mask.shape[-2], mask.shape[-1]
    if h % factor or w % factor:
        raise ValueError(f"dims ({h}, {w}) not divisible by factor {factor}")
    lead = mask.shape[:-2]
    blocks = mask.reshape(*lead, h // factor, factor, w // factor, factor)
    if isinstance(mask, np.ndarray):
        return blocks.any(axis=(-3, -1))
    return blocks.any(dim=-1).any(dim=-2)


class GTEncoder(nn.Module):
    """Bottleneck block encoding (masked) metric depth into the latent grid.

    1x1 convolutions throughout; the first carries stride 2 so the output
    sits at latent resolution. Invalid pixels enter as zeros.
    """

    def __init__(self, latent_dim: int = 16):
        super().__init__()
        self.latent_dim = latent_dim
        self.proj = nn.Conv2d(1, latent_dim, kernel_size=1, stride=2)
        self.block = nn.Sequential(
            nn.Conv2d(latent_dim, latent_dim, kernel_size=1),
            nn.SiLU(),
            nn.Conv2d(latent_dim, latent_dim, kernel_size=1),
        )

    def forward(self, gt: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if gt.shape[-2:] != mask.shape[-2:]:
            raise ValueError(
                f"depth {tuple(gt.shape[-2:])} and mask {tuple(mask.shape[-2:])} disagree"
            )
        h, w = gt.shape[-2:]
        if h % 2 or w % 2:
            raise ValueError(f"depth dims must be even, got ({h}, {w})")
        if gt.dim() == 2:
            gt = gt[None]
            mask = mask[None]
        x = (gt * mask.to(gt.dtype))[:, None]
        x = torch.nn.functional.silu(self.proj(x))
        return x + self.block(x)


class DepthDecoder(nn.Module):
    """Latent-to-depth decoder: 1x1 conv, 3x3 transposed conv (x2 upsample),
    3x3 conv, sigmoid, then the reciprocal mapping with an upper clamp."""

    def __init__(self, latent_dim: int = 16, hidden: int = 32, cap: float = 1e6):
        super().__init__()
        if cap <= 1.0:
            raise ValueError(f"cap must exceed 1, got {cap}")
        self.latent_dim = latent_dim
        self.cap = float(cap)
        self.pre = nn.Conv2d(latent_dim, hidden, kernel_size=1)
        self.up = nn.ConvTranspose2d(
            hidden, hidden, kernel_size=3, stride=2, padding=1, output_padding=1
        )
        self.post = nn.Conv2d(hidden, 1, kernel_size=3, padding=1)

    def forward(self, latent: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(latent).all():
            raise ValueError("non-finite latent passed to the decoder")
        squeeze = latent.dim() == 3
        if squeeze:
            latent = latent[None]
        x = torch.nn.functional.silu(self.pre(latent))
        x = torch.nn.functional.silu(self.up(x))
        s = torch.sigmoid(self.post(x))
        depth = depth_from_activation(s, self.cap)[:, 0]
        return depth[0] if squeeze else depth
