"""Training losses: the one-step denoising loss, the masked pixel-wise
depth loss (printed form and scale-invariant log form), the masked latent
alignment loss, and their weighted combination.

All functions run on torch tensors and stay differentiable; invalid pixels
are removed by boolean indexing before any reduction, so they provably
cannot contribute.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

PIXEL_LOSS_MODES = ("as_printed", "scale_invariant_log")


@dataclass
class LossBreakdown:
    """One optimizer step's loss components. Fields may be python floats or
    0-dim tensors; ``l_total`` always equals the stated weighted sum."""

    l_ddim: object
    l_pixel: object
    l_latent: object
    l_aux: object
    l_total: object
    weights: tuple
    valid_count: int

    def as_floats(self) -> dict:
        out = {}
        for name in ("l_ddim", "l_pixel", "l_latent", "l_aux", "l_total"):
            value = getattr(self, name)
            out[name] = float(value.detach()) if torch.is_tensor(value) else float(value)
        return out


def ddim_loss(x_prev_target: torch.Tensor, x_prev_pred: torch.Tensor) -> torch.Tensor:
    """Mean squared difference between the diffusion target and the one-step
    denoising prediction."""
    if x_prev_target.shape != x_prev_pred.shape:
        raise ValueError(
            f"shape mismatch: {tuple(x_prev_target.shape)} vs {tuple(x_prev_pred.shape)}"
        )
    return ((x_prev_target - x_prev_pred) ** 2).mean()


def pixel_loss(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor,
               lam: float = 0.85, mode: str = "as_printed") -> torch.Tensor:
    """Masked pixel-wise depth loss over the T valid pixels.

    as_printed:          sqrt( (1/T) sum d_i^2 + (lam/T^2) (sum d_i)^2 ),
                         d_i = gt - pred on valid pixels.
    scale_invariant_log: same shape with d_i = log gt - log pred and a minus
                         sign on the squared-sum term (invariant to a global
                         depth scale at lam = 1).
    """
    if mode not in PIXEL_LOSS_MODES:
        raise ValueError(f"unknown pixel loss mode {mode!r}")
    if pred.shape != gt.shape or pred.shape != mask.shape:
        raise ValueError("pred, gt, and mask must share one shape")
    if not bool(mask.any()):
        raise ValueError("pixel loss needs at least one valid pixel")
    p = pred[mask]
    g = gt[mask]
    t = p.numel()
    if mode == "scale_invariant_log":
        if bool((p <= 0).any()) or bool((g <= 0).any()):
            raise ValueError("log mode requires strictly positive depths")
        d = torch.log(g) - torch.log(p)
        val = (d ** 2).sum() / t - lam / t ** 2 * d.sum() ** 2
    else:
        d = g - p
        val = (d ** 2).sum() / t + lam / t ** 2 * d.sum() ** 2
    return torch.sqrt(torch.clamp(val, min=0.0))


def latent_loss(x0: torch.Tensor, gt_latent: torch.Tensor,
                latent_mask: torch.Tensor) -> torch.Tensor:
    """Masked latent alignment: per-cell squared difference summed over the
    channel axis, averaged over valid cells.

    Latents are (B, d, h, w) or (d, h, w); the mask covers the spatial grid.
    """
    if x0.shape != gt_latent.shape:
        raise ValueError(f"latent shapes differ: {tuple(x0.shape)} vs {tuple(gt_latent.shape)}")
    if x0.dim() == 3:
        x0, gt_latent = x0[None], gt_latent[None]
    if latent_mask.dim() == 2:
        latent_mask = latent_mask[None].expand(x0.shape[0], -1, -1)
    if latent_mask.shape != (x0.shape[0], *x0.shape[2:]):
        raise ValueError("latent mask must cover the (B, h, w) grid")
    if not bool(latent_mask.any()):
        raise ValueError("latent loss needs at least one valid cell")
    per_cell = ((x0 - gt_latent) ** 2).sum(dim=1)
    return per_cell[latent_mask].mean()


def aux_depth_loss(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Auxiliary masked L1 + L2 depth error, each weighted 1.0."""
    if not bool(mask.any()):
        raise ValueError("aux loss needs at least one valid pixel")
    d = gt[mask] - pred[mask]
    return d.abs().mean() + (d ** 2).mean()


def total_loss(l_ddim, l_pixel, l_latent, weights=(1.0, 1.0, 1.0),
               aux_active: bool = False, pred=None, gt=None, mask=None) -> LossBreakdown:
    """Weighted sum of the three components, plus the auxiliary depth terms
    while they are active."""
    for name, part in (("l_ddim", l_ddim), ("l_pixel", l_pixel), ("l_latent", l_latent)):
        value = float(part.detach()) if torch.is_tensor(part) else float(part)
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite loss component {name}")
    w1, w2, w3 = (float(w) for w in weights)
    l_aux = 0.0
    if aux_active:
        if pred is None or gt is None or mask is None:
            raise ValueError("aux loss requires pred, gt, and mask")
        l_aux = aux_depth_loss(pred, gt, mask)
    total = w1 * l_ddim + w2 * l_pixel + w3 * l_latent + l_aux
    n_valid = int(mask.sum()) if mask is not None else 0
    return LossBreakdown(
        l_ddim=l_ddim, l_pixel=l_pixel, l_latent=l_latent, l_aux=l_aux,
        l_total=total, weights=(w1, w2, w3), valid_count=n_valid,
    )
