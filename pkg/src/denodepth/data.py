"""Synthetic scenes with analytic depth, LiDAR-like sparsification, and the
on-disk sample format.

Scenes are z-buffers of simple primitives (ground plane, fronto-parallel
rectangles, tilted planes, spheres) over a pixel grid. Image intensity is a
deterministic function of albedo, surface normal, and depth, so depth is
recoverable from appearance. Depth maps serialize as 16-bit grayscale PNG
with value = round(depth_m * 256) and 0 reserved for invalid pixels.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image

DEPTH_SCALE = 256.0
MANIFEST_VERSION = 1
ALL_KINDS = ("ground", "rect", "plane", "sphere")

# Fixed light direction for the shading rule (unit vector, toward the scene).
_LIGHT = np.array([-0.3, -0.4, -0.85])
_LIGHT = _LIGHT / np.linalg.norm(_LIGHT)


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 96
    min_objects: int = 2
    max_objects: int = 5
    kinds: tuple = ALL_KINDS
    depth_min: float = 2.0
    depth_max: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.depth_min <= 0:
            raise ValueError("depth_min must be positive")
        if self.depth_max <= self.depth_min:
            raise ValueError("depth_max must exceed depth_min")
        if self.height % 2 or self.width % 2:
            raise ValueError("scene dims must be even")
        if not (0 <= self.min_objects <= self.max_objects):
            raise ValueError("bad object count range")
        unknown = set(self.kinds) - set(ALL_KINDS)
        if unknown:
            raise ValueError(f"unknown primitive kinds {sorted(unknown)}")
        if "ground" not in self.kinds and self.min_objects == 0:
            raise ValueError("unsatisfiable spec: zero objects with no ground plane")

    def hash(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class Sample:
    image: np.ndarray        # (H, W, 3) float32 in [0, 1], quantized to 1/255
    depth: np.ndarray        # (H, W) float32 metres, dense ground truth
    sparse_depth: np.ndarray  # (H, W) float32, zero where invalid
    sparse_mask: np.ndarray  # (H, W) bool
    meta: dict = field(default_factory=dict)


def _shade(depth, normals, albedo, depth_max):
    lambert = np.maximum(normals @ _LIGHT, 0.0)
    atten = 1.0 - 0.5 * depth / depth_max
    intensity = albedo * (0.3 + 0.7 * lambert)[..., None] * atten[..., None]
    return np.clip(intensity, 0.0, 1.0)


def generate_scene(spec: SceneSpec, seed: int) -> Sample:
    """Render one dense sample; (spec, seed) determines every byte."""
    rng = np.random.default_rng(seed)
    h, w = spec.height, spec.width
    vv, uu = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    span = spec.depth_max - spec.depth_min

    depth = np.full((h, w), spec.depth_max, dtype=np.float64)
    normals = np.zeros((h, w, 3))
    normals[..., 2] = -1.0
    albedo = np.full((h, w, 3), 0.55)

    if "ground" in spec.kinds:
        near = spec.depth_min + 0.1 * span
        gslope = (near - spec.depth_max) / max(h - 1, 1)
        depth = spec.depth_max + gslope * vv
        normals = _grad_normal(np.zeros_like(depth), np.full_like(depth, gslope))
        albedo = np.broadcast_to(rng.uniform(0.35, 0.95, size=3), (h, w, 3)).copy()

    placeable = [k for k in spec.kinds if k != "ground"]
    n_obj = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    for _ in range(n_obj):
        if not placeable:
            break
        kind = placeable[int(rng.integers(len(placeable)))]
        obj_albedo = rng.uniform(0.35, 0.95, size=3)
        if kind == "sphere":
            r = float(rng.uniform(0.12, 0.3) * min(h, w))
            cu = float(rng.uniform(r, w - 1 - r))
            cv = float(rng.uniform(r, h - 1 - r))
            z0 = float(rng.uniform(spec.depth_min + 0.25 * span, spec.depth_max - 0.1 * span))
            bulge = float(rng.uniform(0.05, 0.15) * span)
            k = bulge / r
            rho2 = (uu - cu) ** 2 + (vv - cv) ** 2
            support = rho2 < r ** 2
            root = np.sqrt(np.maximum(r ** 2 - rho2, 1e-12))
            z = z0 - k * root
            zu = k * (uu - cu) / root
            zv = k * (vv - cv) / root
        else:
            ow = float(rng.uniform(0.15, 0.45) * w)
            oh = float(rng.uniform(0.15, 0.45) * h)
            cu = float(rng.uniform(ow / 2, w - 1 - ow / 2))
            cv = float(rng.uniform(oh / 2, h - 1 - oh / 2))
            support = (np.abs(uu - cu) <= ow / 2) & (np.abs(vv - cv) <= oh / 2)
            z0 = float(rng.uniform(spec.depth_min + 0.15 * span, spec.depth_max - 0.15 * span))
            if kind == "plane":
                margin = 0.12 * span
                gu = float(rng.uniform(-1.0, 1.0)) * margin / max(ow / 2, 1.0)
                gv = float(rng.uniform(-1.0, 1.0)) * margin / max(oh / 2, 1.0)
            else:
                gu = gv = 0.0
            z = z0 + gu * (uu - cu) + gv * (vv - cv)
            zu = np.full_like(z, gu)
            zv = np.full_like(z, gv)
        win = support & (z < depth)
        depth[win] = z[win]
        normals[win] = _grad_normal(zu, zv)[win]
        albedo[win] = obj_albedo

    depth = np.clip(depth, spec.depth_min, spec.depth_max)
    image = _shade(depth, normals, albedo, spec.depth_max)
    image = np.round(image * 255.0).astype(np.uint8).astype(np.float32) / 255.0
    depth = depth.astype(np.float32)
    return Sample(
        image=image,
        depth=depth,
        sparse_depth=depth.copy(),
        sparse_mask=np.ones((h, w), dtype=bool),
        meta={"seed": int(seed), "spec_hash": spec.hash()},
    )


def _grad_normal(zu, zv):
    """Camera-facing unit normal of the surface z(u, v) from its gradient."""
    n = np.stack([np.asarray(zu, dtype=np.float64),
                  np.asarray(zv, dtype=np.float64),
                  -np.ones_like(np.asarray(zu, dtype=np.float64))], axis=-1)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def sparsify(depth: np.ndarray, density: float, pattern: str = "uniform",
             seed: int = 0):
    """Thin a dense depth map to a target valid density.

    uniform: exactly round(density * H * W) pixels chosen without replacement.
    scanline: every k-th row kept whole, k = round(1/density).
    """
    if not (0.0 < density <= 1.0):
        raise ValueError(f"density must lie in (0, 1], got {density}")
    h, w = depth.shape
    if pattern == "uniform":
        n_keep = int(round(density * h * w))
        rng = np.random.default_rng(seed)
        flat = rng.permutation(h * w)[:max(n_keep, 1)]
        mask = np.zeros(h * w, dtype=bool)
        mask[flat] = True
        mask = mask.reshape(h, w)
    elif pattern == "scanline":
        k = max(int(round(1.0 / density)), 1)
        mask = np.zeros((h, w), dtype=bool)
        mask[k // 2::k, :] = True
    else:
        raise ValueError(f"unknown sparsify pattern {pattern!r}")
    sparse = np.where(mask, depth, 0.0).astype(np.float32)
    return sparse, mask


# ---------------------------------------------------------------------------
# On-disk format

def save_depth_png(path, depth: np.ndarray, mask: np.ndarray | None = None):
    """16-bit grayscale PNG, value = round(depth * 256), 0 = invalid."""
    depth = np.asarray(depth, dtype=np.float64)
    if mask is None:
        mask = depth > 0.0
    values = np.round(depth * DEPTH_SCALE)
    if np.any(values[mask] > 65535):
        raise ValueError("depth >= 256 m is unrepresentable in the 16-bit format")
    if np.any(values[mask] < 1):
        raise ValueError(
            "valid depth below the 1/512 m floor would quantize to the invalid value"
        )
    out = np.where(mask, values, 0.0).astype(np.uint16)
    Image.fromarray(out).save(path)


def load_depth_png(path):
    arr = np.asarray(Image.open(path), dtype=np.uint16)
    mask = arr > 0
    depth = (arr.astype(np.float32) / DEPTH_SCALE) * mask
    return depth, mask


def save_image_png(path, image: np.ndarray):
    arr = np.round(np.asarray(image, dtype=np.float64) * 255.0)
    Image.fromarray(np.clip(arr, 0, 255).astype(np.uint8)).save(path)


def load_image_png(path):
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return arr / 255.0


def sample_paths(root, split: str, sample_id: str) -> dict:
    root = Path(root)
    return {
        "image": root / split / "image" / f"{sample_id}.png",
        "depth": root / split / "depth" / f"{sample_id}.png",
        "sparse": root / split / "sparse" / f"{sample_id}.png",
    }


def save_sample(root, split: str, sample_id: str, sample: Sample):
    paths = sample_paths(root, split, sample_id)
    for p in paths.values():
        p.parent.mkdir(parents=True, exist_ok=True)
    save_image_png(paths["image"], sample.image)
    save_depth_png(paths["depth"], sample.depth, mask=None)
    save_depth_png(paths["sparse"], sample.sparse_depth, mask=sample.sparse_mask)


def load_sample(root, split: str, sample_id: str) -> Sample:
    paths = sample_paths(root, split, sample_id)
    for p in paths.values():
        if not p.exists():
            raise FileNotFoundError(f"missing sample file {p}")
    image = load_image_png(paths["image"])
    depth, _ = load_depth_png(paths["depth"])
    sparse, mask = load_depth_png(paths["sparse"])
    return Sample(image=image, depth=depth, sparse_depth=sparse,
                  sparse_mask=mask, meta={"id": sample_id})


def write_manifest(root, split: str, ids, spec_hash: str) -> Path:
    path = Path(root) / split / "manifest.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"version": MANIFEST_VERSION, "split": split,
               "ids": list(ids), "spec_hash": spec_hash}
    path.write_text(json.dumps(payload, indent=2) + "\n")
    return path


def load_manifest(path) -> dict:
    path = Path(path)
    payload = json.loads(path.read_text())
    if payload.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version in {path}")
    root = path.parent.parent
    for sid in payload["ids"]:
        for p in sample_paths(root, payload["split"], sid).values():
            if not p.exists():
                raise FileNotFoundError(f"manifest references missing file {p}")
    payload["root"] = root
    return payload


def make_dataset(spec: SceneSpec, root, split: str, count: int, seed_start: int,
                 density: float = 1.0, pattern: str = "uniform") -> Path:
    """Generate ``count`` samples with consecutive seeds and write a manifest."""
    ids = []
    for i in range(count):
        seed = seed_start + i
        sample = generate_scene(spec, seed)
        if density < 1.0:
            sample.sparse_depth, sample.sparse_mask = sparsify(
                sample.depth, density, pattern=pattern, seed=seed)
        sid = f"{seed:08d}"
        save_sample(root, split, sid, sample)
        ids.append(sid)
    return write_manifest(root, split, ids, spec.hash())
