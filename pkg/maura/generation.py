#!/usr/bin/env python3
"""
Sampling entry points on trained checkpoints: caption-to-video generation,
sketch-guided inpainting and checkpoint evaluation.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
import torch
from loguru import logger

from maura.adapt_inpaint import inpaint_sample
from maura.checkpoints import DiffusionBundle, load_adapter, load_diffusion, load_vae
from maura.config_utils import seed_everything
from maura.constants import DEFAULT_CFG_SCALE, DEFAULT_DIFFUSION_STEPS, DEFAULT_FPS
from maura.container import read_array, read_bundle, write_array
from maura.exceptions import ValidationError
from maura.maskdiff import reverse_sample
from maura.metrics import MetricReport, masked_region_psnr, write_metrics
from maura.quantize import codebook_usage
from maura.synthdata import VideoClip, export_gif, export_png_strip, read_dataset
from maura.training import METRICS_NAME, evaluate_denoiser, evaluate_vae, tokenize_clips

PathLike = Union[str, Path]


@dataclass
class GenerationResult:
    clip: VideoClip
    tokens: torch.Tensor
    output_files: List[Path] = field(default_factory=list)


def _write_outputs(clip: VideoClip, tokens: Optional[torch.Tensor], out: Path, stem: str) -> List[Path]:
    out.mkdir(parents=True, exist_ok=True)
    files = [
        export_gif(clip, out / f"{stem}.gif"),
        export_png_strip(clip, out / f"{stem}.png"),
        write_array(out / f"{stem}_pixels.maura", clip.pixels),
    ]
    if tokens is not None:
        files.append(write_array(out / f"{stem}_tokens.maura", tokens.numpy().astype(np.int32)))
    return files


def generate(
    checkpoint: Union[PathLike, DiffusionBundle],
    caption: str,
    steps: int = DEFAULT_DIFFUSION_STEPS,
    cfg_scale: float = DEFAULT_CFG_SCALE,
    seed: int = 0,
    out: Optional[PathLike] = None,
    fps: int = DEFAULT_FPS,
    n_frames: Optional[int] = None,
    size: int = 32,
) -> GenerationResult:
    """
    Caption to video: toy text encoding, guided reverse sampling, token lookup and decoding.

    Writes `sample.gif`, `sample.png` and the raw pixel/token arrays when `out` is given.
    """
    if not caption or not caption.strip():
        raise ValidationError("caption must be nonempty")
    bundle = checkpoint if isinstance(checkpoint, DiffusionBundle) else load_diffusion(checkpoint)
    seed_everything(seed)
    vae, denoiser = bundle.vae, bundle.denoiser
    n_frames = n_frames or vae.cfg.n_frames
    grid = vae.cfg.latent_shape(n_frames, size, size)[1:]

    with torch.no_grad():
        cond = denoiser.condition([caption], fps)
        tokens = reverse_sample(
            denoiser,
            cond,
            bundle.schedule,
            steps=steps,
            cfg_scale=cfg_scale,
            seed=seed,
            grid_shape=grid,
            codebook_size=denoiser.cfg.codebook_size,
            unconditional=cond.unconditional(),
        )
        pixels = vae.detokenize(tokens)[0]
    clip = VideoClip.from_tensor(pixels, fps=fps)
    logger.info(f"Generated {clip.n_frames} frames for '{caption}' ({steps} steps, cfg {cfg_scale}, seed {seed})")

    files = _write_outputs(clip, tokens[0], Path(out), "sample") if out is not None else []
    return GenerationResult(clip=clip, tokens=tokens[0], output_files=files)


def _load_video(path: PathLike, fps: int) -> VideoClip:
    pixels = read_array(path)
    if pixels.dtype == np.uint8:
        pixels = pixels.astype(np.float32) / 255.0
    return VideoClip(pixels, fps=fps)


def inpaint_video(
    checkpoint: PathLike,
    adapter: PathLike,
    video: PathLike,
    mask: PathLike,
    sketch: Optional[PathLike] = None,
    caption: Optional[str] = None,
    steps: int = DEFAULT_DIFFUSION_STEPS,
    cfg_scale: float = DEFAULT_CFG_SCALE,
    seed: int = 0,
    out: Optional[PathLike] = None,
    fps: int = DEFAULT_FPS,
    composite: bool = True,
) -> GenerationResult:
    """
    Inpaint the masked region of a stored clip.

    video, mask and sketch are MAURA1 arrays shaped (N, 3, H, W), (N, H, W) and
    (H, W). The mask is applied to the video before tokenization; outside the
    mask the input pixels are kept when `composite` is set.
    """
    bundle = load_diffusion(checkpoint)
    model = load_adapter(adapter, bundle)
    seed_everything(seed)

    clip = _load_video(video, fps)
    masks = read_array(mask).astype(np.uint8)
    if masks.shape != (clip.n_frames, clip.height, clip.width):
        raise ValidationError(f"mask shape {masks.shape} does not match video (N, H, W)")
    V_m = VideoClip(clip.pixels * (1 - masks[:, None, :, :]).astype(np.float32), fps=fps)
    sketch_arr = read_array(sketch) if sketch is not None else None

    result = inpaint_sample(
        model, bundle.vae, V_m, sketch_arr, caption, bundle.schedule, steps, cfg_scale, seed,
        masks=masks, composite=composite,
    )
    region_psnr = masked_region_psnr(clip, result, masks)
    logger.info(f"Inpainted {masks.mean():.1%} of the clip, masked-region PSNR {region_psnr:.2f} dB")

    files = _write_outputs(result, None, Path(out), "inpainted") if out is not None else []
    return GenerationResult(clip=result, tokens=torch.empty(0, dtype=torch.long), output_files=files)


def evaluate_checkpoint(
    checkpoint: PathLike, data: PathLike, out: Optional[PathLike] = None, seed: int = 0
) -> MetricReport:
    """Metrics of a vae or diffusion checkpoint on a dataset directory."""
    header, _ = read_bundle(checkpoint)
    samples = read_dataset(data)
    if not samples:
        raise ValidationError(f"dataset {data} is empty")

    if header.get("kind") == "vae":
        report = evaluate_vae(load_vae(checkpoint), samples, seed)
    elif header.get("kind") == "diffusion":
        bundle = load_diffusion(checkpoint)
        tokens = tokenize_clips(bundle.vae, samples)
        usage = codebook_usage(tokens, bundle.vae.codebook_size)
        report = evaluate_vae(bundle.vae, samples, seed)
        report.stage = "diffusion"
        report.token_accuracy = evaluate_denoiser(
            bundle.denoiser, tokens, samples, bundle.schedule.T, bundle.schedule.shape, seed
        )
        report.codebook_perplexity = usage.perplexity
        report.codebook_usage = usage.fraction_used
    else:
        raise ValidationError(f"{checkpoint}: cannot evaluate a '{header.get('kind')}' checkpoint")

    report.extras["checkpoint_hash"] = header["content_hash"]
    if out is None:
        out_path = Path(checkpoint).parent / "eval_metrics.json"
    else:
        out_path = Path(out) if Path(out).suffix == ".json" else Path(out) / METRICS_NAME
    write_metrics(report, out_path)
    return report
