"""Multi-scale visual feature extraction and top-down aggregation into the
monocular condition grid at quarter resolution.

The backbone is a small 4-stage convolutional net producing features at
strides 4, 8, 16, 32; the aggregator is a feature-pyramid pathway with
lateral 1x1 projections, nearest x2 upsampling and elementwise summation.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

# Per-channel standardization applied after scaling pixels to [0, 1].
IMAGE_MEAN = 0.5
IMAGE_STD = 0.5

# Named channel plans; "toy" trains on one CPU, the larger two mirror the
# widths of common convolutional and transformer extractors.
BACKBONE_PRESETS = {
    "toy": (32, 64, 128, 256),
    "mid": (64, 128, 256, 512),
    "large": (192, 384, 768, 1536),
}


def standardize_image(img: np.ndarray, mean: float = IMAGE_MEAN,
                      std: float = IMAGE_STD) -> torch.Tensor:
    """(H, W, 3) float array in [0, 1] -> standardized (1, 3, H, W) tensor."""
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {img.shape}")
    x = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32))
    x = (x - mean) / std
    return x.permute(2, 0, 1)[None]


def pad_to_multiple(x: torch.Tensor, multiple: int = 32) -> torch.Tensor:
    """Zero-pad the bottom/right of a (B, C, H, W) tensor to a stride multiple."""
    h, w = x.shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return x
    return F.pad(x, (0, pw, 0, ph))


def _norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(num_groups=min(8, ch), num_channels=ch)


class _Stage(nn.Module):
    def __init__(self, ch_in, ch_out, stride):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(ch_in, ch_out, 3, stride=stride, padding=1),
            _norm(ch_out),
            nn.SiLU(),
            nn.Conv2d(ch_out, ch_out, 3, padding=1),
            _norm(ch_out),
            nn.SiLU(),
        )

    def forward(self, x):
        return self.body(x)


class Backbone(nn.Module):
    """Four feature levels at strides 4, 8, 16, 32."""

    def __init__(self, channel_plan=(32, 64, 128, 256), in_ch: int = 3):
        super().__init__()
        if len(channel_plan) != 4:
            raise ValueError("channel_plan must list four stage widths")
        self.channel_plan = tuple(channel_plan)
        c1, c2, c3, c4 = channel_plan
        self.stem = _Stage(in_ch, c1, stride=2)
        self.stage1 = _Stage(c1, c1, stride=2)   # stride 4
        self.stage2 = _Stage(c1, c2, stride=2)   # stride 8
        self.stage3 = _Stage(c2, c3, stride=2)   # stride 16
        self.stage4 = _Stage(c3, c4, stride=2)   # stride 32

    def forward(self, img: torch.Tensor):
        h, w = img.shape[-2:]
        if h < 32 or w < 32:
            raise ValueError(f"image {h}x{w} smaller than the 32x32 minimum")
        if h % 32 or w % 32:
            raise ValueError(f"image dims ({h}, {w}) must be divisible by 32; pad first")
        f4 = self.stage1(self.stem(img))
        f8 = self.stage2(f4)
        f16 = self.stage3(f8)
        f32 = self.stage4(f16)
        return (f4, f8, f16, f32)


class ConditionAggregator(nn.Module):
    """Top-down pyramid fusion ending at stride 4 with cond_dim channels."""

    def __init__(self, channel_plan=(32, 64, 128, 256), cond_dim: int = 64):
        super().__init__()
        self.cond_dim = cond_dim
        self.laterals = nn.ModuleList(
            [nn.Conv2d(ch, cond_dim, kernel_size=1) for ch in channel_plan]
        )
        self.smooth = nn.Conv2d(cond_dim, cond_dim, kernel_size=3, padding=1)

    def forward(self, pyramid) -> torch.Tensor:
        if len(pyramid) != 4:
            raise ValueError("expected a 4-level pyramid")
        for fine, coarse in zip(pyramid, pyramid[1:]):
            if fine.shape[-2:] != tuple(2 * s for s in coarse.shape[-2:]):
                raise ValueError("pyramid levels are not dyadically nested")
        top = self.laterals[3](pyramid[3])
        p16 = self.laterals[2](pyramid[2]) + F.interpolate(top, scale_factor=2, mode="nearest")
        p8 = self.laterals[1](pyramid[1]) + F.interpolate(p16, scale_factor=2, mode="nearest")
        p4 = self.laterals[0](pyramid[0]) + F.interpolate(p8, scale_factor=2, mode="nearest")
        return self.smooth(p4)


class ConditionNet(nn.Module):
    """Backbone + aggregator: image tensor -> (B, cond_dim, H/4, W/4)."""

    def __init__(self, channel_plan=(32, 64, 128, 256), cond_dim: int = 64):
        super().__init__()
        self.backbone = Backbone(channel_plan)
        self.aggregator = ConditionAggregator(channel_plan, cond_dim)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        return self.aggregator(self.backbone(img))
