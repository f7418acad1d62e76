"""Operator entry points: dataset synthesis, training, inference,
evaluation, and denoising-trace export.

Exit codes: 0 success, 2 usage/config, 3 I/O, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import secrets
import sys
from pathlib import Path

from . import data as data_mod
from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .metrics import MetricAccumulator
from .sampler import SamplerError, export_prediction, export_trace, infer
from .schedule import make_timestep_plan
from .trainer import ConfigMismatchError, NonFiniteLossError, load_bundle, run_training

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment configuration INI file")
    common.add_argument("--seed", type=int, default=None,
                        help="master seed (omitted: drawn from entropy and printed)")
    common.add_argument("--out", help="output directory")

    parser = argparse.ArgumentParser(prog="denodepth")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--n-train", type=int, required=True)
    p.add_argument("--n-val", type=int, default=0)

    p = sub.add_parser("train", parents=[common], help="run self-diffusion training")
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--steps", type=int, default=None, help="override step count")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--diffusion-target", choices=("self", "gt"), default=None)

    p = sub.add_parser("infer", parents=[common], help="predict depth for one image")
    p.add_argument("image", help="8-bit RGB PNG")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--steps", type=int, default=None, help="inference step count")
    p.add_argument("--trace", action="store_true", help="export per-step snapshots")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--cap", type=float, default=80.0, help="evaluation depth cap (m)")
    p.add_argument("--steps", type=int, default=None, help="inference step count")
    p.add_argument("--gt-as-pred", action="store_true",
                   help="score the ground truth against itself (plumbing check)")
    p.add_argument("--irmse", action="store_true", help="also report inverse-depth RMSE")
    return parser


def _resolve_seed(args) -> int:
    if args.seed is not None:
        return args.seed
    if args.config:
        return -1  # sentinel: keep the seeds in the config file
    seed = secrets.randbits(31)
    print(f"seed: {seed}")
    return seed


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    seed = _resolve_seed(args)
    if seed >= 0:
        cfg.train.seed = seed
        cfg.scene = dataclasses.replace(cfg.scene, seed=seed)
    if not cfg.raw_text:
        cfg.raw_text = dump_config(cfg)
    return cfg


def cmd_synth(args) -> int:
    if args.n_train < 1:
        print("synth: --n-train must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    if args.n_val < 0:
        print("synth: --n-val must be non-negative", file=sys.stderr)
        return EXIT_USAGE
    if not args.out:
        print("synth: --out is required", file=sys.stderr)
        return EXIT_USAGE
    cfg = _load_cfg(args).validate()
    base = cfg.scene.seed
    train_manifest = data_mod.make_dataset(
        cfg.scene, args.out, "train", args.n_train, seed_start=base,
        density=cfg.sparse_density, pattern=cfg.sparse_pattern)
    print(train_manifest)
    if args.n_val > 0:
        val_manifest = data_mod.make_dataset(
            cfg.scene, args.out, "val", args.n_val, seed_start=base + args.n_train,
            density=cfg.sparse_density, pattern=cfg.sparse_pattern)
        print(val_manifest)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    if args.steps is not None:
        cfg.train.steps = args.steps
    if args.diffusion_target is not None:
        cfg.train.diffusion_target = args.diffusion_target
    cfg.raw_text = dump_config(cfg)
    cfg.validate()
    if not args.out:
        print("train: --out is required", file=sys.stderr)
        return EXIT_USAGE
    final = run_training(cfg, args.data, args.out, resume=args.resume)
    print(final)
    return EXIT_OK


def cmd_infer(args) -> int:
    if not args.out:
        print("infer: --out is required", file=sys.stderr)
        return EXIT_USAGE
    bundle, sched, payload = load_bundle(args.checkpoint)
    k = args.steps if args.steps is not None else payload["train_k"]
    if not (1 <= k <= sched.t_train):
        print(f"infer: --steps must lie in [1, {sched.t_train}]", file=sys.stderr)
        return EXIT_USAGE
    plan = make_timestep_plan(sched.t_train, k)
    img = data_mod.load_image_png(args.image)
    seed = args.seed if args.seed is not None else _print_entropy_seed()
    trace = infer(img, bundle, sched, plan, seed=seed, trace=args.trace)
    if args.trace:
        export_trace(trace, args.out)
    else:
        export_prediction(trace.final, args.out)
    print(Path(args.out) / "final_depth.png")
    return EXIT_OK


def _print_entropy_seed() -> int:
    seed = secrets.randbits(31)
    print(f"seed: {seed}")
    return seed


def cmd_eval(args) -> int:
    manifest = data_mod.load_manifest(args.manifest)
    acc = MetricAccumulator(cap=args.cap)
    silog_x100 = False
    if args.gt_as_pred:
        for sid in manifest["ids"]:
            sample = data_mod.load_sample(manifest["root"], manifest["split"], sid)
            mask = sample.depth > 0.0
            acc.update(sample.depth, sample.depth, mask)
    else:
        bundle, sched, payload = load_bundle(args.checkpoint)
        if payload.get("config_text"):
            silog_x100 = load_config(text=payload["config_text"]).silog_x100
        k = args.steps if getattr(args, "steps", None) else payload["train_k"]
        plan = make_timestep_plan(sched.t_train, k)
        base_seed = args.seed if args.seed is not None else 0
        for i, sid in enumerate(manifest["ids"]):
            sample = data_mod.load_sample(manifest["root"], manifest["split"], sid)
            trace = infer(sample.image, bundle, sched, plan, seed=base_seed + i)
            mask = sample.depth > 0.0
            acc.update(trace.final, sample.depth, mask)
    report = acc.report(include_irmse=args.irmse)
    if silog_x100:
        report.silog *= 100.0
    payload_json = report.to_json()
    print(payload_json)
    print(report.table_line())
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(payload_json + "\n")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "synth": cmd_synth,
        "train": cmd_train,
        "infer": cmd_infer,
        "eval": cmd_eval,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, ConfigMismatchError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteLossError, SamplerError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
