"""Self-diffusion training: per-step refinement rollout, self-targeted
diffusion supervision, augmentation, the warmup+cosine optimizer schedule,
and checkpointing.

Each optimizer step runs the full K-step deterministic rollout from noise
(gradients retained by default), supervises the decoded result against GT
at valid pixels and the refined latent against the encoded GT, then detaches
the refined latent and uses it as the diffusion target for the one-step
denoising loss. The ablation arm diffuses the encoded GT latent instead.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from . import data as data_mod
from .codec import DepthDecoder, GTEncoder, downsample_mask
from .condition import ConditionNet, standardize_image
from .config import AugmentationConfig, ExperimentConfig, TrainConfig
from .denoiser import DenoiserModel
from .losses import LossBreakdown, ddim_loss, latent_loss, pixel_loss, total_loss
from .schedule import NoiseSchedule, TimestepPlan, ddim_step, make_linear_schedule, \
    make_timestep_plan, q_sample

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class NonFiniteLossError(RuntimeError):
    """Training aborted on a non-finite loss."""


class ConfigMismatchError(ValueError):
    """Checkpoint is incompatible with the requested configuration."""


# ---------------------------------------------------------------------------
# Learning rate schedule

def lr_at(iteration: int, total_iterations: int, cfg: TrainConfig,
          group: str = "backbone") -> float:
    """Linear ramp from 0 over the warmup fraction, then cosine decay from
    base_lr to final_lr at the last iteration. The head group is the
    backbone value times head_lr_multiplier."""
    if not (0 <= iteration < total_iterations):
        raise ValueError(f"iteration {iteration} outside [0, {total_iterations})")
    if group not in ("backbone", "head"):
        raise ValueError(f"unknown parameter group {group!r}")
    warm = max(1, int(round(cfg.warmup_fraction * total_iterations)))
    if iteration < warm:
        lr = cfg.base_lr * iteration / warm
    else:
        span = max(total_iterations - 1 - warm, 1)
        progress = min((iteration - warm) / span, 1.0)
        lr = cfg.final_lr + (cfg.base_lr - cfg.final_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))
    if group == "head":
        lr *= cfg.head_lr_multiplier
    return lr


# ---------------------------------------------------------------------------
# Augmentation

def augment(sample: data_mod.Sample, cfg: AugmentationConfig,
            rng: np.random.Generator) -> data_mod.Sample:
    """Jointly transform image, depth, sparse depth, and mask.

    Order: rotation, spatial scale (depth divided by the factor), crop,
    horizontal flip, color jitter. Out-of-frame pixels after rotation become
    invalid (depth 0, mask false).
    """
    img = sample.image.astype(np.float32, copy=True)
    depth = sample.depth.astype(np.float32, copy=True)
    sparse = sample.sparse_depth.astype(np.float32, copy=True)
    mask = sample.sparse_mask.copy()

    if cfg.rotation_deg > 0.0:
        angle = float(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
        if angle != 0.0:
            img = ndimage.rotate(img, angle, reshape=False, order=1, mode="constant", cval=0.0)
            depth = ndimage.rotate(depth, angle, reshape=False, order=0, mode="constant", cval=0.0)
            sparse = ndimage.rotate(sparse, angle, reshape=False, order=0, mode="constant", cval=0.0)
            mask = ndimage.rotate(mask.astype(np.uint8), angle, reshape=False, order=0,
                                  mode="constant", cval=0).astype(bool)
            inframe = ndimage.rotate(np.ones(depth.shape, dtype=np.uint8), angle,
                                     reshape=False, order=0, mode="constant", cval=0).astype(bool)
            depth *= inframe
            sparse *= inframe
            mask &= inframe

    if cfg.scale_max > cfg.scale_min:
        s = float(rng.uniform(cfg.scale_min, cfg.scale_max))
    else:
        s = float(cfg.scale_min)
    if s != 1.0:
        h, w = depth.shape
        ht, wt = int(round(h * s)), int(round(w * s))
        zy, zx = ht / h, wt / w
        img = ndimage.zoom(img, (zy, zx, 1.0), order=1)
        depth = ndimage.zoom(depth, (zy, zx), order=0) / s
        sparse = ndimage.zoom(sparse, (zy, zx), order=0) / s
        mask = ndimage.zoom(mask.astype(np.uint8), (zy, zx), order=0).astype(bool)

    h, w = depth.shape
    if cfg.crop_h > h or cfg.crop_w > w:
        raise ValueError(f"crop ({cfg.crop_h}, {cfg.crop_w}) larger than image ({h}, {w})")
    top = int(rng.integers(0, h - cfg.crop_h + 1))
    left = int(rng.integers(0, w - cfg.crop_w + 1))
    sl = (slice(top, top + cfg.crop_h), slice(left, left + cfg.crop_w))
    img = img[sl]
    depth = depth[sl]
    sparse = sparse[sl]
    mask = mask[sl]

    if cfg.flip_prob > 0.0 and rng.random() < cfg.flip_prob:
        img = img[:, ::-1].copy()
        depth = depth[:, ::-1].copy()
        sparse = sparse[:, ::-1].copy()
        mask = mask[:, ::-1].copy()

    img = _color_jitter(img, cfg, rng)
    return data_mod.Sample(image=img, depth=depth, sparse_depth=sparse,
                           sparse_mask=mask, meta=dict(sample.meta))


def _color_jitter(img, cfg: AugmentationConfig, rng: np.random.Generator):
    if cfg.brightness > 0.0:
        img = img * (1.0 + float(rng.uniform(-cfg.brightness, cfg.brightness)))
    if cfg.contrast > 0.0:
        f = 1.0 + float(rng.uniform(-cfg.contrast, cfg.contrast))
        mean = img.mean()
        img = mean + (img - mean) * f
    if cfg.saturation > 0.0:
        f = 1.0 + float(rng.uniform(-cfg.saturation, cfg.saturation))
        gray = img.mean(axis=-1, keepdims=True)
        img = gray + (img - gray) * f
    if cfg.hue > 0.0:
        from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
        shift = float(rng.uniform(-cfg.hue, cfg.hue))
        hsv = rgb_to_hsv(np.clip(img, 0.0, 1.0))
        hsv[..., 0] = (hsv[..., 0] + shift) % 1.0
        img = hsv_to_rgb(hsv)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# Model bundle and training state

@dataclass
class ModelBundle:
    condition: ConditionNet
    denoiser: DenoiserModel
    encoder: GTEncoder
    decoder: DepthDecoder
    train_k: int
    diffusion_target: str
    image_mean: float = 0.5
    image_std: float = 0.5

    def backbone_parameters(self):
        return list(self.condition.parameters())

    def head_parameters(self):
        params = []
        for module in (self.denoiser, self.encoder, self.decoder):
            params.extend(module.parameters())
        return params

    def modules(self):
        return (self.condition, self.denoiser, self.encoder, self.decoder)

    def train(self):
        for m in self.modules():
            m.train()

    def eval(self):
        for m in self.modules():
            m.eval()

    def state_dicts(self):
        return {
            "condition": self.condition.state_dict(),
            "denoiser": self.denoiser.state_dict(),
            "encoder": self.encoder.state_dict(),
            "decoder": self.decoder.state_dict(),
        }

    def load_state_dicts(self, states):
        self.condition.load_state_dict(states["condition"])
        self.denoiser.load_state_dict(states["denoiser"])
        self.encoder.load_state_dict(states["encoder"])
        self.decoder.load_state_dict(states["decoder"])


def build_bundle(cfg: ExperimentConfig) -> ModelBundle:
    """Construct all learned modules, seeded from the training seed."""
    torch.manual_seed(cfg.train.seed)
    m = cfg.model
    return ModelBundle(
        condition=ConditionNet(channel_plan=m.channel_plan, cond_dim=m.cond_dim),
        denoiser=DenoiserModel(latent_dim=m.latent_dim, cond_dim=m.cond_dim,
                               time_dim=m.time_dim, t_max=cfg.train.t_train,
                               attn_window=m.attn_window),
        encoder=GTEncoder(latent_dim=m.latent_dim),
        decoder=DepthDecoder(latent_dim=m.latent_dim, hidden=m.decoder_hidden,
                             cap=m.depth_cap),
        train_k=cfg.train.k_infer,
        diffusion_target=cfg.train.diffusion_target,
        image_mean=m.image_mean,
        image_std=m.image_std,
    )


def build_optimizer(bundle: ModelBundle, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        [
            {"params": bundle.backbone_parameters(), "lr": 0.0},
            {"params": bundle.head_parameters(), "lr": 0.0},
        ],
        betas=(cfg.adam_beta1, cfg.adam_beta2),
        weight_decay=cfg.weight_decay,
    )


@dataclass
class TrainState:
    bundle: ModelBundle
    optimizer: torch.optim.Optimizer
    sched: NoiseSchedule
    plan: TimestepPlan
    iteration: int
    total_iterations: int
    torch_gen: torch.Generator
    np_rng: np.random.Generator


def init_state(cfg: ExperimentConfig, total_iterations: int) -> TrainState:
    bundle = build_bundle(cfg)
    sched = make_linear_schedule(cfg.train.t_train, cfg.train.beta_start, cfg.train.beta_end)
    plan = make_timestep_plan(cfg.train.t_train, cfg.train.k_infer)
    gen = torch.Generator().manual_seed(cfg.train.seed)
    np_rng = np.random.default_rng(cfg.train.seed)
    return TrainState(
        bundle=bundle, optimizer=build_optimizer(bundle, cfg.train),
        sched=sched, plan=plan, iteration=0, total_iterations=total_iterations,
        torch_gen=gen, np_rng=np_rng,
    )


# ---------------------------------------------------------------------------
# The self-diffusion step

def rollout_latent(bundle: ModelBundle, cond: torch.Tensor, plan: TimestepPlan,
                   sched: NoiseSchedule, gen: torch.Generator,
                   retain_grad: bool = True) -> torch.Tensor:
    """Full deterministic rollout from standard-normal noise to the refined
    latent. With retain_grad=False the latent is detached between steps so
    gradients only flow through the final denoiser application."""
    b = cond.shape[0]
    h, w = cond.shape[-2] * 2, cond.shape[-1] * 2
    x = torch.randn(b, bundle.denoiser.latent_dim, h, w, generator=gen)
    for t, t_prev in plan.pairs():
        if not retain_grad:
            x = x.detach()
        x0_hat = bundle.denoiser(x, t, cond)
        x = ddim_step(x, x0_hat, t, t_prev, sched)
    return x


def diffusion_pair(base: torch.Tensor, ts, eps: torch.Tensor, sched: NoiseSchedule):
    """Per-element (x_t, x_{t-1}) diffusion pair built with one shared noise
    draw, so the pair satisfies the deterministic-step identity exactly."""
    xts, targets = [], []
    for i, t in enumerate(ts):
        t = int(t)
        xts.append(q_sample(base[i], t, eps[i], sched))
        targets.append(q_sample(base[i], t - 1, eps[i], sched))
    return torch.stack(xts), torch.stack(targets)


def batch_tensors(batch, supervision: str, image_mean: float = 0.5,
                  image_std: float = 0.5):
    """Stack samples into padded (image, gt, mask) tensors; padding is
    marked invalid so it never contributes to any loss."""
    imgs, gts, masks = [], [], []
    for sample in batch:
        img = standardize_image(sample.image, image_mean, image_std)[0]
        if supervision == "sparse":
            gt, mask = sample.sparse_depth, sample.sparse_mask
        else:
            gt = sample.depth
            mask = sample.depth > 0.0
        gt = torch.from_numpy(np.ascontiguousarray(gt, dtype=np.float32))
        mask = torch.from_numpy(np.ascontiguousarray(mask))
        imgs.append(img)
        gts.append(gt)
        masks.append(mask)
    img = torch.stack(imgs)
    gt = torch.stack(gts)
    mask = torch.stack(masks)
    ph = (-img.shape[-2]) % 32
    pw = (-img.shape[-1]) % 32
    if ph or pw:
        img = torch.nn.functional.pad(img, (0, pw, 0, ph))
        gt = torch.nn.functional.pad(gt, (0, pw, 0, ph))
        mask = torch.nn.functional.pad(mask.to(torch.uint8), (0, pw, 0, ph)).bool()
    return img, gt, mask


def self_diffusion_step(batch, state: TrainState, cfg: ExperimentConfig,
                        update: bool = True):
    """One optimizer step over a batch of samples; returns the loss
    breakdown (as floats) and the sampled diffusion timesteps."""
    if not batch:
        raise ValueError("empty batch")
    tcfg = cfg.train
    img, gt, mask = batch_tensors(batch, tcfg.supervision,
                                  cfg.model.image_mean, cfg.model.image_std)
    if not bool(mask.flatten(1).any(dim=1).all()):
        raise ValueError("a batch sample has no valid pixels")

    for group, name in zip(state.optimizer.param_groups, ("backbone", "head")):
        group["lr"] = lr_at(state.iteration, state.total_iterations, tcfg, name)
    state.optimizer.zero_grad(set_to_none=True)

    cond = state.bundle.condition(img)
    x0_ref = rollout_latent(state.bundle, cond, state.plan, state.sched,
                            state.torch_gen, retain_grad=tcfg.rollout_grad == "full")
    pred = state.bundle.decoder(x0_ref)
    l_pixel = pixel_loss(pred, gt, mask, lam=tcfg.pixel_loss_lambda,
                         mode=tcfg.pixel_loss_mode)
    gt_latent = state.bundle.encoder(gt, mask)
    latent_mask = downsample_mask(mask, 2)
    l_latent = latent_loss(x0_ref, gt_latent, latent_mask)

    base = gt_latent.detach() if tcfg.diffusion_target == "gt" else x0_ref.detach()
    b = base.shape[0]
    ts = torch.randint(1, tcfg.t_train + 1, (b,), generator=state.torch_gen)
    eps = torch.randn(base.shape, generator=state.torch_gen)
    xt, x_target = diffusion_pair(base, ts, eps, state.sched)
    x0_hat = state.bundle.denoiser(xt, ts, cond)
    x_prev = torch.stack([
        ddim_step(xt[i], x0_hat[i], int(ts[i]), int(ts[i]) - 1, state.sched)
        for i in range(b)
    ])
    l_ddim = ddim_loss(x_target, x_prev)

    aux_active = state.iteration < tcfg.aux_fraction * state.total_iterations
    breakdown = total_loss(l_ddim, l_pixel, l_latent, tcfg.loss_weights,
                           aux_active, pred, gt, mask)
    if not torch.isfinite(breakdown.l_total):
        raise NonFiniteLossError(f"non-finite loss at iteration {state.iteration}")

    if update:
        breakdown.l_total.backward()
        if tcfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(
                state.bundle.backbone_parameters() + state.bundle.head_parameters(),
                tcfg.grad_clip)
        state.optimizer.step()

    floats = LossBreakdown(weights=breakdown.weights,
                           valid_count=breakdown.valid_count,
                           **breakdown.as_floats())
    return floats, [int(t) for t in ts]


# ---------------------------------------------------------------------------
# Checkpointing

def save_checkpoint(path, state: TrainState, cfg: ExperimentConfig):
    from .config import dump_config

    payload = {
        "format_version": CHECKPOINT_VERSION,
        "iteration": state.iteration,
        "total_iterations": state.total_iterations,
        "config_text": cfg.raw_text or dump_config(cfg),
        "latent_dim": cfg.model.latent_dim,
        "cond_dim": cfg.model.cond_dim,
        "t_train": cfg.train.t_train,
        "train_k": state.bundle.train_k,
        "diffusion_target": state.bundle.diffusion_target,
        "beta_start": cfg.train.beta_start,
        "beta_end": cfg.train.beta_end,
        "model": state.bundle.state_dicts(),
        "optimizer": state.optimizer.state_dict(),
        "torch_rng": state.torch_gen.get_state(),
        "numpy_rng": state.np_rng.bit_generator.state,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def _read_checkpoint(path) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise ValueError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise ValueError(f"{path} is not a training checkpoint")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise ValueError(
            f"checkpoint format version {payload['format_version']} unsupported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    return payload


def load_checkpoint(path, cfg: ExperimentConfig) -> TrainState:
    """Restore a full training state; training continues bit-compatibly."""
    payload = _read_checkpoint(path)
    if payload["latent_dim"] != cfg.model.latent_dim:
        raise ConfigMismatchError(
            f"checkpoint latent_dim {payload['latent_dim']} != configured "
            f"{cfg.model.latent_dim}"
        )
    if payload["cond_dim"] != cfg.model.cond_dim:
        raise ConfigMismatchError(
            f"checkpoint cond_dim {payload['cond_dim']} != configured {cfg.model.cond_dim}"
        )
    if payload["diffusion_target"] != cfg.train.diffusion_target:
        log.warning(
            "checkpoint was trained with diffusion_target=%s but the current "
            "configuration requests %s",
            payload["diffusion_target"], cfg.train.diffusion_target,
        )
    state = init_state(cfg, payload["total_iterations"])
    state.bundle.load_state_dicts(payload["model"])
    state.bundle.train_k = payload["train_k"]
    state.optimizer.load_state_dict(payload["optimizer"])
    state.iteration = payload["iteration"]
    state.torch_gen.set_state(payload["torch_rng"])
    state.np_rng.bit_generator.state = payload["numpy_rng"]
    return state


def load_bundle(path, cfg: ExperimentConfig | None = None):
    """Inference-side loader: returns (bundle, schedule, checkpoint payload).

    When no configuration is supplied, the one echoed into the checkpoint is
    used to rebuild the modules.
    """
    from .config import load_config

    payload = _read_checkpoint(path)
    if cfg is None:
        if not payload.get("config_text"):
            raise ValueError(f"checkpoint {path} carries no configuration echo")
        cfg = load_config(text=payload["config_text"])
    if payload["latent_dim"] != cfg.model.latent_dim:
        raise ConfigMismatchError(
            f"checkpoint latent_dim {payload['latent_dim']} != configured "
            f"{cfg.model.latent_dim}"
        )
    bundle = build_bundle(cfg)
    bundle.load_state_dicts(payload["model"])
    bundle.train_k = payload["train_k"]
    bundle.diffusion_target = payload["diffusion_target"]
    bundle.eval()
    sched = make_linear_schedule(payload["t_train"], payload["beta_start"],
                                 payload["beta_end"])
    return bundle, sched, payload


# ---------------------------------------------------------------------------
# Training loop

def total_steps(cfg: ExperimentConfig, n_samples: int) -> int:
    if cfg.train.steps > 0:
        return cfg.train.steps
    per_epoch = max(1, math.ceil(n_samples / cfg.train.batch_size))
    return cfg.train.epochs * per_epoch


def run_training(cfg: ExperimentConfig, data_root, out_dir, resume=None,
                 log_stream=None) -> Path:
    """Train to completion; writes train.jsonl, periodic checkpoints, and
    final.ckpt under out_dir. Returns the final checkpoint path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = data_mod.load_manifest(Path(data_root) / "train" / "manifest.json")
    samples = [data_mod.load_sample(manifest["root"], "train", sid)
               for sid in manifest["ids"]]
    if not samples:
        raise ValueError("empty training manifest")

    total = total_steps(cfg, len(samples))
    if resume is not None:
        state = load_checkpoint(resume, cfg)
        state.total_iterations = total
        log.info("resumed at iteration %d of %d", state.iteration, total)
    else:
        state = init_state(cfg, total)
    state.bundle.train()

    log_path = out_dir / "train.jsonl"
    own_stream = log_stream is None
    fh = open(log_path, "a" if resume is not None else "w") if own_stream else log_stream
    last_good = resume
    try:
        while state.iteration < total:
            t0 = time.perf_counter()
            n = len(samples)
            size = cfg.train.batch_size
            idx = state.np_rng.choice(n, size=size, replace=size > n)
            batch = [augment(samples[i], cfg.augment, state.np_rng) for i in idx]
            try:
                breakdown, ts = self_diffusion_step(batch, state, cfg)
            except NonFiniteLossError:
                if last_good is not None:
                    log.error("non-finite loss; last good checkpoint: %s", last_good)
                raise
            wall_ms = (time.perf_counter() - t0) * 1000.0
            row = {
                "iteration": state.iteration,
                "lr_backbone": lr_at(state.iteration, total, cfg.train, "backbone"),
                "lr_head": lr_at(state.iteration, total, cfg.train, "head"),
                **breakdown.as_floats(),
                "t_sampled": ts,
                "arm": cfg.train.diffusion_target,
                "wall_ms": wall_ms,
            }
            fh.write(json.dumps(row) + "\n")
            state.iteration += 1
            if cfg.train.checkpoint_every > 0 and state.iteration % cfg.train.checkpoint_every == 0:
                ckpt = out_dir / f"step_{state.iteration:07d}.ckpt"
                save_checkpoint(ckpt, state, cfg)
                last_good = ckpt
        final = out_dir / "final.ckpt"
        save_checkpoint(final, state, cfg)
    finally:
        if own_stream:
            fh.close()
    return final
