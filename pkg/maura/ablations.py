#!/usr/bin/env python3
"""
Desk-scale ablation sweeps.

Each sweep reruns one training stage in memory for a list of settings and
returns a summary frame (validated by AblationResultSchema) with the mean loss
over the final steps of every run.
"""

from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import pandas as pd
from loguru import logger

from maura.adapt_inpaint import LoraConfig
from maura.checkpoints import load_diffusion, load_vae
from maura.constants import CODEBOOK_SIZE_SWEEP, LORA_RANK_SWEEP
from maura.container import atomic_write_bytes
from maura.exceptions import ValidationError
from maura.internal_schemas import validate_ablation_results
from maura.run_config import RunConfig
from maura.training import TrainingLog, load_samples, fit_diffusion, fit_inpaint, fit_vae

DENOISER_VARIANTS = {
    "fft+rope": {"fft_enabled": True, "rope_enabled": True},
    "no_fft": {"fft_enabled": False, "rope_enabled": True},
    "sinusoidal": {"fft_enabled": True, "rope_enabled": False},
}


def _require_stage(cfg: RunConfig, stage: str, sweep: str) -> None:
    if cfg.stage != stage:
        raise ValidationError(f"{sweep} sweep needs a '{stage}' stage config, got '{cfg.stage}'")


def _summary(sweep: str, runs: Dict[str, TrainingLog], steps: int, output_dir: Optional[Path]) -> pd.DataFrame:
    df = pd.DataFrame(
        [{"sweep": sweep, "setting": name, "steps": steps, "final_loss": log.final_loss()} for name, log in runs.items()]
    )
    df = validate_ablation_results(df)
    if output_dir is not None:
        curves = pd.concat([log.frame().assign(setting=name) for name, log in runs.items()], ignore_index=True)
        atomic_write_bytes(output_dir / f"ablation_{sweep}.csv", df.to_csv(index=False).encode("utf-8"))
        atomic_write_bytes(output_dir / f"ablation_{sweep}_curves.csv", curves.to_csv(index=False).encode("utf-8"))
    logger.info(f"Ablation '{sweep}':\n{df.to_string(index=False)}")
    return df


def lora_rank_sweep(
    cfg: RunConfig, ranks: Sequence[int] = LORA_RANK_SWEEP, output_dir: Optional[Path] = None
) -> pd.DataFrame:
    """Finetune adapters of every rank over the same base checkpoint and data."""
    _require_stage(cfg, "inpaint", "lora_rank")
    base = load_diffusion(cfg.diffusion_checkpoint)
    samples = load_samples(cfg)
    runs = {}
    for rank in ranks:
        run_cfg = replace(cfg, lora=LoraConfig(**{**cfg.lora.to_dict(), "rank": rank}))
        _, runs[f"rank={rank}"] = fit_inpaint(run_cfg, base, samples)
    return _summary("lora_rank", runs, cfg.steps, output_dir)


def codebook_size_sweep(
    cfg: RunConfig, sizes: Sequence[int] = CODEBOOK_SIZE_SWEEP, output_dir: Optional[Path] = None
) -> pd.DataFrame:
    """Train the autoencoder with a learned VQ codebook of each size."""
    _require_stage(cfg, "vae", "codebook_size")
    samples = load_samples(cfg)
    runs = {}
    for size in sizes:
        run_cfg = replace(cfg, vae=replace(cfg.vae, quantizer="vq", codebook_size=size))
        _, runs[f"K={size}"] = fit_vae(run_cfg, samples)
    return _summary("codebook_size", runs, cfg.steps, output_dir)


def denoiser_variant_sweep(
    cfg: RunConfig, variants: Optional[List[str]] = None, output_dir: Optional[Path] = None
) -> pd.DataFrame:
    """Diffusion training with and without the Fourier pair, and with sinusoidal instead of rotary positions."""
    _require_stage(cfg, "diffusion", "denoiser_variant")
    names = variants or list(DENOISER_VARIANTS)
    unknown = [n for n in names if n not in DENOISER_VARIANTS]
    if unknown:
        raise ValidationError(f"Unknown denoiser variants {unknown}, expected {list(DENOISER_VARIANTS)}")
    vae = load_vae(cfg.vae_checkpoint)
    for p in vae.parameters():
        p.requires_grad_(False)
    samples = load_samples(cfg)
    runs = {}
    for name in names:
        run_cfg = replace(cfg, denoiser=replace(cfg.denoiser, **DENOISER_VARIANTS[name]))
        _, _, runs[name] = fit_diffusion(run_cfg, vae, samples)
    return _summary("denoiser_variant", runs, cfg.steps, output_dir)
