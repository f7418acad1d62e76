"""Experiment configuration: one declarative INI file (key/value with
sections) covering scene synthesis, model dims, schedule, training, and
augmentation. The raw text is echoed into checkpoints and logs.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field

from .data import SceneSpec


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


@dataclass
class ModelConfig:
    latent_dim: int = 16
    cond_dim: int = 64
    time_dim: int = 64
    depth_cap: float = 1e6
    backbone_preset: str = ""      # named plan; overrides channel_plan when set
    channel_plan: tuple = (32, 64, 128, 256)
    decoder_hidden: int = 32
    attn_window: int = 0           # 0 = full self-attention over the latent grid
    image_mean: float = 0.5        # per-channel standardization of [0, 1] pixels
    image_std: float = 0.5


@dataclass
class TrainConfig:
    epochs: int = 1
    steps: int = 0              # > 0 overrides the epoch count
    batch_size: int = 2
    base_lr: float = 1e-4
    final_lr: float = 1e-8
    warmup_fraction: float = 0.15
    aux_fraction: float = 0.5
    head_lr_multiplier: float = 10.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    weight_decay: float = 0.01
    grad_clip: float = 1.0             # 0 disables gradient-norm clipping
    t_train: int = 1000
    k_infer: int = 20
    beta_start: float = 1e-4
    beta_end: float = 0.02
    diffusion_target: str = "self"     # "self" | "gt"
    supervision: str = "dense"         # "dense" | "sparse"
    rollout_grad: str = "full"         # "full" | "truncated"
    lambda_ddim: float = 1.0
    lambda_pixel: float = 1.0
    lambda_latent: float = 1.0
    pixel_loss_mode: str = "as_printed"
    pixel_loss_lambda: float = 0.85
    checkpoint_every: int = 0          # 0 writes only the final checkpoint
    seed: int = 0

    @property
    def loss_weights(self):
        return (self.lambda_ddim, self.lambda_pixel, self.lambda_latent)


@dataclass
class AugmentationConfig:
    crop_h: int = 64
    crop_w: int = 96
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    hue: float = 0.02
    scale_min: float = 1.0
    scale_max: float = 1.5
    flip_prob: float = 0.5
    rotation_deg: float = 5.0

    @classmethod
    def identity(cls, height: int, width: int) -> "AugmentationConfig":
        return cls(crop_h=height, crop_w=width, brightness=0.0, contrast=0.0,
                   saturation=0.0, hue=0.0, scale_min=1.0, scale_max=1.0,
                   flip_prob=0.0, rotation_deg=0.0)


@dataclass
class ExperimentConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    sparse_density: float = 0.04
    sparse_pattern: str = "uniform"
    silog_x100: bool = False
    raw_text: str = ""

    def validate(self):
        problems = []
        t = self.train
        if not (1 <= t.k_infer <= t.t_train):
            problems.append(f"k_infer {t.k_infer} must lie in [1, t_train={t.t_train}]")
        if not (0.0 < t.warmup_fraction < 1.0):
            problems.append(f"warmup_fraction {t.warmup_fraction} outside (0, 1)")
        if not (t.base_lr > t.final_lr > 0.0):
            problems.append("need base_lr > final_lr > 0")
        if not (0.0 < t.beta_start <= t.beta_end < 1.0):
            problems.append(f"bad beta range ({t.beta_start}, {t.beta_end})")
        if t.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if t.diffusion_target not in ("self", "gt"):
            problems.append(f"diffusion_target must be self|gt, got {t.diffusion_target!r}")
        if t.supervision not in ("dense", "sparse"):
            problems.append(f"supervision must be dense|sparse, got {t.supervision!r}")
        if t.rollout_grad not in ("full", "truncated"):
            problems.append(f"rollout_grad must be full|truncated, got {t.rollout_grad!r}")
        if t.pixel_loss_mode not in ("as_printed", "scale_invariant_log"):
            problems.append(f"unknown pixel_loss_mode {t.pixel_loss_mode!r}")
        if t.epochs < 1 and t.steps < 1:
            problems.append("need epochs >= 1 or steps >= 1")
        m = self.model
        if m.backbone_preset:
            from .condition import BACKBONE_PRESETS

            if m.backbone_preset not in BACKBONE_PRESETS:
                problems.append(
                    f"unknown backbone_preset {m.backbone_preset!r} "
                    f"(choose from {sorted(BACKBONE_PRESETS)})"
                )
            else:
                m.channel_plan = BACKBONE_PRESETS[m.backbone_preset]
        if m.latent_dim < 1 or m.cond_dim < 1:
            problems.append("latent_dim and cond_dim must be positive")
        if m.time_dim % 2:
            problems.append("time_dim must be even")
        if m.depth_cap <= 1.0:
            problems.append("depth_cap must exceed 1")
        if m.attn_window < 0:
            problems.append("attn_window must be >= 0")
        if m.image_std <= 0:
            problems.append("image_std must be positive")
        a = self.augment
        if a.crop_h > self.scene.height or a.crop_w > self.scene.width:
            problems.append(
                f"crop ({a.crop_h}, {a.crop_w}) exceeds image "
                f"({self.scene.height}, {self.scene.width})"
            )
        if a.scale_min < 1.0 or a.scale_max < a.scale_min:
            problems.append("scale range must satisfy 1 <= scale_min <= scale_max")
        if not (0.0 <= a.flip_prob <= 1.0):
            problems.append("flip_prob outside [0, 1]")
        if not (0.0 < self.sparse_density <= 1.0):
            problems.append(f"sparse_density {self.sparse_density} outside (0, 1]")
        if self.sparse_pattern not in ("uniform", "scanline"):
            problems.append(f"unknown sparse_pattern {self.sparse_pattern!r}")
        if problems:
            raise ConfigError("; ".join(problems))
        return self


_SECTIONS = {
    "scene": SceneSpec,
    "model": ModelConfig,
    "train": TrainConfig,
    "augment": AugmentationConfig,
}


def _cast(value: str, target_type):
    if target_type is bool:
        lowered = value.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"cannot interpret {value!r} as a boolean")
    if target_type is tuple:
        return tuple(
            int(v) if v.strip().lstrip("-").isdigit() else v.strip()
            for v in value.split(",") if v.strip()
        )
    return target_type(value)


def load_config(path=None, text: str | None = None) -> ExperimentConfig:
    """Build an ExperimentConfig from an INI file (or raw text), leaving any
    unset key at its default. Raises ConfigError on unknown keys."""
    if text is None:
        with open(path, "r") as fh:
            text = fh.read()
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc

    cfg = ExperimentConfig(raw_text=text)
    extras = {"sparse_density": float, "sparse_pattern": str, "silog_x100": bool}
    for section in parser.sections():
        if section == "data":
            for key, value in parser.items(section):
                if key not in extras:
                    raise ConfigError(f"unknown key {key!r} in [data]")
                setattr(cfg, key, _cast(value, extras[key]))
            continue
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        cls = _SECTIONS[section]
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in parser.items(section):
            if key not in fields:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            ftype = fields[key].type
            if isinstance(ftype, str):
                ftype = {"int": int, "float": float, "str": str,
                         "bool": bool, "tuple": tuple}.get(ftype, str)
            kwargs[key] = _cast(value, ftype)
        if section == "scene":
            base = dataclasses.asdict(cfg.scene)
            base.update(kwargs)
            base["kinds"] = tuple(base["kinds"])
            cfg.scene = SceneSpec(**base)
        else:
            current = getattr(cfg, section if section != "augment" else "augment")
            for key, value in kwargs.items():
                setattr(current, key, value)
    return cfg


def dump_config(cfg: ExperimentConfig) -> str:
    """Render the effective configuration as INI text."""
    parser = configparser.ConfigParser()
    parser["scene"] = {k: _fmt(v) for k, v in dataclasses.asdict(cfg.scene).items()}
    parser["model"] = {k: _fmt(v) for k, v in dataclasses.asdict(cfg.model).items()}
    parser["train"] = {k: _fmt(v) for k, v in dataclasses.asdict(cfg.train).items()}
    parser["augment"] = {k: _fmt(v) for k, v in dataclasses.asdict(cfg.augment).items()}
    parser["data"] = {
        "sparse_density": _fmt(cfg.sparse_density),
        "sparse_pattern": cfg.sparse_pattern,
        "silog_x100": _fmt(cfg.silog_x100),
    }
    out = io.StringIO()
    parser.write(out)
    return out.getvalue()


def _fmt(value) -> str:
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    return str(value)
