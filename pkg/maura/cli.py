#!/usr/bin/env python3
"""
Command-line interface.

Examples:
  maura synth-data --out data/synth --clips 32 --frames 8 --size 32 --seed 0
  maura train-vae --config configs/vae.json
  maura train-diffusion --config configs/diffusion.json
  maura finetune-inpaint --config configs/inpaint.json
  maura generate --ckpt runs/diffusion/diffusion.maura --caption "a red circle moves right" --out out/
  maura inpaint --ckpt runs/diffusion/diffusion.maura --adapter runs/inpaint/adapter.maura \\
      --video clip_pixels.maura --mask clip_masks.maura --sketch clip_sketch.maura --out out/
  maura eval --ckpt runs/vae/vae.maura --data data/synth
  maura gradcheck --list
  maura ablate --sweep lora_rank --config configs/inpaint.json

Exit codes: 0 success, 2 validation error, 3 numerical failure.
"""

import argparse
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional

from loguru import logger

from maura import ablations
from maura.config_utils import configure_logging, load_environment_config
from maura.constants import (
    DEFAULT_CFG_SCALE,
    DEFAULT_DIFFUSION_STEPS,
    DEFAULT_FPS,
    EXIT_NUMERICAL,
    EXIT_OK,
    EXIT_VALIDATION,
)
from maura.exceptions import NumericalError, ValidationError
from maura.generation import evaluate_checkpoint, generate, inpaint_video
from maura.gradcheck import gradcheck, gradcheck_all, list_targets
from maura.run_config import load_run_config
from maura.synthdata import generate_dataset, write_dataset
from maura.training import finetune_inpaint, train_diffusion, train_vae

SWEEPS: Dict[str, Callable] = {
    "lora_rank": ablations.lora_rank_sweep,
    "codebook_size": ablations.codebook_size_sweep,
    "denoiser_variant": ablations.denoiser_variant_sweep,
}


def cmd_synth_data(args) -> int:
    samples = generate_dataset(args.clips, args.frames, args.size, args.seed, fps=args.fps, workers=args.workers)
    write_dataset(samples, args.out)
    return EXIT_OK


def _train(fn: Callable) -> Callable:
    def run(args) -> int:
        result = fn(load_run_config(args.config))
        logger.info(f"Checkpoint: {result.checkpoint}")
        return EXIT_OK

    return run


def cmd_generate(args) -> int:
    result = generate(
        args.ckpt, args.caption, steps=args.steps, cfg_scale=args.cfg, seed=args.seed, out=args.out, fps=args.fps
    )
    for path in result.output_files:
        logger.info(f"Wrote {path}")
    return EXIT_OK


def cmd_inpaint(args) -> int:
    result = inpaint_video(
        args.ckpt,
        args.adapter,
        args.video,
        args.mask,
        sketch=args.sketch,
        caption=args.caption,
        steps=args.steps,
        cfg_scale=args.cfg,
        seed=args.seed,
        out=args.out,
        fps=args.fps,
        composite=not args.no_composite,
    )
    for path in result.output_files:
        logger.info(f"Wrote {path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    report = evaluate_checkpoint(args.ckpt, args.data, out=args.out, seed=args.seed)
    for key, value in report.to_dict().items():
        if value is not None and key != "extras":
            logger.info(f"{key}: {value}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.list:
        for name in list_targets():
            print(name)
        return EXIT_OK
    if not args.target:
        raise ValidationError("gradcheck needs --target NAME, --target all or --list")
    reports = gradcheck_all(args.seed) if args.target == "all" else [gradcheck(args.target, args.seed)]
    failed = [r.target for r in reports if not r.passed]
    for r in reports:
        print(f"{r.target:28s} {r.max_rel_error:.3e}  tol {r.tolerance:.0e}  {'ok' if r.passed else 'FAILED'}")
    if failed:
        raise NumericalError(f"gradient check failed for {failed}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_run_config(args.config)
    out = Path(args.out or cfg.output_dir)
    SWEEPS[args.sweep](cfg, output_dir=out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maura",
        description="Desk-scale masked-diffusion video generation and sketch-guided inpainting",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=__doc__.split("Examples:")[1].split("Exit codes")[0],
    )
    parser.add_argument("--log-level", type=str, help="Override MAURA_LOG_LEVEL")
    parser.add_argument("--env", type=str, help="Environment config to load (dev or prod)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="Generate a synthetic clip dataset")
    p.add_argument("--out", required=True, help="Dataset directory")
    p.add_argument("--clips", type=int, default=32)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fps", type=int, default=DEFAULT_FPS)
    p.add_argument("--workers", type=int, default=1, help="Generation threads (results do not depend on it)")
    p.set_defaults(func=cmd_synth_data)

    stages = (("train-vae", train_vae), ("train-diffusion", train_diffusion), ("finetune-inpaint", finetune_inpaint))
    for name, fn in stages:
        p = sub.add_parser(name, help=f"Run the {name} stage from a JSON run config")
        p.add_argument("--config", required=True, help="Run config JSON file")
        p.set_defaults(func=_train(fn))

    p = sub.add_parser("generate", help="Caption to video")
    p.add_argument("--ckpt", required=True, help="Diffusion checkpoint")
    p.add_argument("--caption", required=True)
    p.add_argument("--steps", type=int, default=DEFAULT_DIFFUSION_STEPS)
    p.add_argument("--cfg", type=float, default=DEFAULT_CFG_SCALE, help="Guidance scale")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fps", type=int, default=DEFAULT_FPS)
    p.add_argument("--out", required=True, help="Output directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("inpaint", help="Sketch-guided inpainting of a stored clip")
    p.add_argument("--ckpt", required=True, help="Diffusion checkpoint the adapter was trained on")
    p.add_argument("--adapter", required=True, help="Adapter checkpoint")
    p.add_argument("--video", required=True, help="(N, 3, H, W) MAURA1 array")
    p.add_argument("--mask", required=True, help="(N, H, W) MAURA1 array, 1 = inpaint")
    p.add_argument("--sketch", help="(H, W) MAURA1 edge map")
    p.add_argument("--caption")
    p.add_argument("--steps", type=int, default=DEFAULT_DIFFUSION_STEPS)
    p.add_argument("--cfg", type=float, default=DEFAULT_CFG_SCALE)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fps", type=int, default=DEFAULT_FPS)
    p.add_argument("--no-composite", action="store_true", help="Keep decoded pixels outside the mask")
    p.add_argument("--out", required=True, help="Output directory")
    p.set_defaults(func=cmd_inpaint)

    p = sub.add_parser("eval", help="Metrics of a vae or diffusion checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="Dataset directory")
    p.add_argument("--out", help="metrics.json path or directory")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="Finite-difference gradient checks")
    p.add_argument("--target", help="Target name or 'all'")
    p.add_argument("--list", action="store_true", help="List registered targets")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="Run an ablation sweep")
    p.add_argument("--sweep", required=True, choices=sorted(SWEEPS))
    p.add_argument("--config", required=True, help="Run config of the swept stage")
    p.add_argument("--out", help="Output directory (default: the config's output_dir)")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        load_environment_config(args.env)
        configure_logging(args.log_level)
        return args.func(args)
    except ValidationError as e:
        logger.error(f"Validation error: {e}")
        return EXIT_VALIDATION
    except NumericalError as e:
        logger.error(f"Numerical failure: {e}")
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
