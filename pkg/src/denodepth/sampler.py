"""Deterministic inference: iterate denoise-and-step over a timestep plan
from a seeded standard-normal latent, with optional per-step decoded
snapshots of the refinement.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .codec import depth_from_activation  # noqa: F401  (re-export convenience)
from .condition import standardize_image
from .data import save_depth_png
from .schedule import NoiseSchedule, TimestepPlan, ddim_step
from .trainer import ModelBundle

log = logging.getLogger(__name__)


class SamplerError(RuntimeError):
    """Non-finite latent encountered during the denoising chain."""


@dataclass
class InferenceTrace:
    snapshots: list          # [(t, (H, W) depth array)], one per transition
    final: np.ndarray        # (H, W) float32 depth in metres
    k: int
    wall_ms: list = field(default_factory=list)


def infer(img: np.ndarray, bundle: ModelBundle, sched: NoiseSchedule,
          plan: TimestepPlan, seed: int = 0, trace: bool = False) -> InferenceTrace:
    """Run the full denoising chain on one image.

    ``img`` is (H, W, 3) float in [0, 1]. The output depth map matches the
    input dims (internal padding to a stride multiple is cropped away).
    Deterministic given (image, parameters, seed, plan).
    """
    if plan.steps[0] > sched.t_train:
        raise ValueError(
            f"plan starts at {plan.steps[0]} but the schedule has only "
            f"{sched.t_train} steps"
        )
    if plan.k != bundle.train_k:
        log.warning(
            "inferring with %d steps but the checkpoint was trained with %d; "
            "accuracy degrades without retraining", plan.k, bundle.train_k,
        )
    h_img, w_img = img.shape[:2]
    x_in = standardize_image(img, bundle.image_mean, bundle.image_std)
    ph = (-h_img) % 32
    pw = (-w_img) % 32
    if ph or pw:
        x_in = torch.nn.functional.pad(x_in, (0, pw, 0, ph))

    gen = torch.Generator().manual_seed(seed)
    snapshots = []
    walls = []
    bundle.eval()
    with torch.no_grad():
        cond = bundle.condition(x_in)
        h_lat, w_lat = cond.shape[-2] * 2, cond.shape[-1] * 2
        x = torch.randn(1, bundle.denoiser.latent_dim, h_lat, w_lat, generator=gen)
        for step_idx, (t, t_prev) in enumerate(plan.pairs()):
            t0 = time.perf_counter()
            x0_hat = bundle.denoiser(x, t, cond)
            x = ddim_step(x, x0_hat, t, t_prev, sched)
            if not torch.isfinite(x).all():
                raise SamplerError(
                    f"non-finite latent after step {step_idx} (t={t} -> {t_prev})"
                )
            walls.append((time.perf_counter() - t0) * 1000.0)
            if trace:
                snap = bundle.decoder(x)[0, :h_img, :w_img].numpy().astype(np.float32)
                snapshots.append((t_prev, snap))
        if trace:
            final = snapshots[-1][1]
        else:
            final = bundle.decoder(x)[0, :h_img, :w_img].numpy().astype(np.float32)
    return InferenceTrace(snapshots=snapshots, final=final, k=plan.k, wall_ms=walls)


def colormap_depth(depth: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    """8-bit visualization: perceptually uniform ramp, near = warm,
    far = cool, invalid = black."""
    from matplotlib import colormaps

    depth = np.asarray(depth, dtype=np.float64)
    if valid is None:
        valid = depth > 0.0
    lo = float(depth[valid].min()) if valid.any() else 0.0
    hi = float(depth[valid].max()) if valid.any() else 1.0
    norm = (depth - lo) / (hi - lo) if hi > lo else np.zeros_like(depth)
    rgba = colormaps["plasma_r"](np.clip(norm, 0.0, 1.0))
    out = (rgba[..., :3] * 255.0).round().astype(np.uint8)
    out[~valid] = 0
    return out


def _storable(depth: np.ndarray) -> np.ndarray:
    # The 16-bit x256 format spans [1/256, 255.99] m; clamp for export only.
    return np.clip(depth, 1.0 / 256.0, 65535.0 / 256.0)


def export_prediction(depth: np.ndarray, out_dir, stem: str = "final") -> dict:
    """Write the 16-bit depth PNG and an 8-bit colormapped PNG."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    depth16 = out_dir / f"{stem}_depth.png"
    save_depth_png(depth16, _storable(depth), mask=np.ones(depth.shape, dtype=bool))
    color_path = out_dir / f"{stem}_color.png"
    Image.fromarray(colormap_depth(depth)).save(color_path)
    return {"depth": depth16.name, "color": color_path.name}


def export_trace(trace: InferenceTrace, out_dir) -> dict:
    """Write per-step 16-bit depth PNGs plus a JSON index; returns the index."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = {"k": trace.k, "steps": []}
    for t, snap in trace.snapshots:
        name = f"trace_t{t:04d}.png"
        save_depth_png(out_dir / name, _storable(snap),
                       mask=np.ones(snap.shape, dtype=bool))
        index["steps"].append({"t": int(t), "file": name})
    index.update(export_prediction(trace.final, out_dir))
    (out_dir / "trace_index.json").write_text(json.dumps(index, indent=2) + "\n")
    return index
