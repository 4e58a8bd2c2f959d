#!/usr/bin/env python3
"""
Training stages: autoencoder pretraining, diffusion training and inpainting finetune.

Each public `train_*` function reads its inputs from disk, runs the matching
in-memory `fit_*` loop, writes a checkpoint, `training_log.csv` and
`metrics.json` into the run's output directory, and returns a StageResult.
The `fit_*` loops are also used directly by the ablation sweeps.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from loguru import logger
from torch.optim.lr_scheduler import LambdaLR
from tqdm import tqdm

from maura.adapt_inpaint import (
    InpaintBatch,
    InpaintCondition,
    InpaintDenoiser,
    build_inpaint_model,
    check_freeze_ledger,
    finetune_step,
    inpaint_sample,
    mask_video,
)
from maura.checkpoints import (
    DiffusionBundle,
    load_diffusion,
    load_vae,
    save_adapter,
    save_diffusion,
    save_vae,
    state_to_arrays,
)
from maura.config_utils import seed_everything
from maura.container import atomic_write_bytes, write_bundle
from maura.exceptions import NumericalError, ValidationError
from maura.internal_schemas import validate_training_log
from maura.maskdiff import (
    build_schedule,
    diffusion_loss,
    forward_corrupt_batch,
    masked_token_accuracy,
    sample_timesteps,
)
from maura.metrics import MetricReport, masked_region_psnr, psnr, ssim, write_metrics
from maura.quantize import codebook_usage
from maura.run_config import OptimizerConfig, RunConfig
from maura.spectral import SpectralDenoiser
from maura.synthdata import InpaintSample, clip_seed, cosine_ratio, full_frame_mask, patch_mask, read_dataset
from maura.vae3d import Vae3d, vae_loss

TRAINING_LOG_NAME = "training_log.csv"
METRICS_NAME = "metrics.json"
LOG_COLUMNS = ["step", "stage", "loss", "lr", "rec", "codebook", "commit", "mfi", "token_accuracy"]


@dataclass
class StageResult:
    checkpoint: Path
    report: MetricReport
    log: pd.DataFrame
    output_files: List[Path] = field(default_factory=list)


class TrainingLog:
    """Per-step loss curve; validated against TrainingLogSchema on export."""

    def __init__(self, stage: str):
        self.stage = stage
        self.rows: List[Dict] = []

    def add(self, step: int, loss: float, lr: float, **components) -> None:
        self.rows.append({"step": step, "stage": self.stage, "loss": loss, "lr": lr, **components})

    def frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.rows, columns=LOG_COLUMNS).astype({c: float for c in LOG_COLUMNS[4:]})
        return validate_training_log(df)

    def write(self, path: Path) -> Path:
        return atomic_write_bytes(path, self.frame().to_csv(index=False).encode("utf-8"))

    def final_loss(self, window: int = 20) -> float:
        tail = [row["loss"] for row in self.rows[-window:]]
        return float(np.mean(tail)) if tail else float("nan")


def lr_lambda(schedule: str, total_steps: int) -> Callable[[int], float]:
    """Multiplier on the base LR: cosine decay or linear decay to zero over total_steps."""
    if schedule == "cosine":
        return lambda s: 0.5 * (1.0 + math.cos(math.pi * min(s, total_steps) / total_steps))
    if schedule == "linear":
        return lambda s: max(0.0, 1.0 - s / total_steps)
    raise ValidationError(f"Unknown LR schedule '{schedule}'")


def build_optimizer(
    params, cfg: OptimizerConfig, total_steps: int
) -> Tuple[torch.optim.Optimizer, LambdaLR]:
    params = [p for p in params if p.requires_grad]
    if not params:
        raise ValidationError("no trainable parameters")
    optimizer = torch.optim.AdamW(params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    return optimizer, LambdaLR(optimizer, lr_lambda(cfg.schedule, total_steps))


def batch_indices(n_items: int, batch_size: int, step: int, seed: int) -> np.ndarray:
    """Deterministic per-step batch, sorted so assembly order never depends on the draw."""
    if batch_size >= n_items:
        return np.arange(n_items)
    rng = np.random.default_rng([seed, step])
    return np.sort(rng.choice(n_items, size=batch_size, replace=False))


def write_snapshot(output_dir: Path, stage: str, step: int, module: nn.Module, extra: Optional[Dict] = None) -> Path:
    path = output_dir / f"snapshot_{stage}_step{step:06d}.maura"
    header = {"kind": "snapshot", "stage": stage, "step": step, **(extra or {})}
    write_bundle(path, header, state_to_arrays(module))
    return path


def check_finite(
    loss: float, stage: str, step: int, module: nn.Module, output_dir: Optional[Path], extra: Optional[Dict] = None
) -> None:
    """Abort the run on a NaN/Inf loss after writing a diagnostic snapshot."""
    if math.isfinite(loss):
        return
    snapshot = None
    if output_dir is not None:
        snapshot = write_snapshot(output_dir, stage, step, module, {"loss": str(loss), **(extra or {})})
    logger.error(f"Non-finite {stage} loss {loss} at step {step}; snapshot {snapshot}")
    raise NumericalError(f"{stage} loss became {loss} at step {step} (snapshot: {snapshot})")


def load_samples(cfg: RunConfig) -> List[InpaintSample]:
    samples = read_dataset(cfg.dataset)
    if cfg.max_clips is not None:
        samples = samples[: cfg.max_clips]
    if not samples:
        raise ValidationError(f"dataset {cfg.dataset} is empty")
    return samples


def _clip_batch(samples: List[InpaintSample]) -> torch.Tensor:
    return torch.stack([s.clip.to_tensor() for s in samples])


def _finish(
    cfg: RunConfig, log: TrainingLog, report: MetricReport, checkpoint: Path
) -> StageResult:
    out = Path(cfg.output_dir)
    log_file = log.write(out / TRAINING_LOG_NAME)
    report.loss_curve_file = TRAINING_LOG_NAME
    report.final_loss = log.final_loss()
    metrics_file = write_metrics(report, out / METRICS_NAME)
    cfg.save(out / "run_config.json")
    return StageResult(
        checkpoint=checkpoint, report=report, log=log.frame(), output_files=[checkpoint, log_file, metrics_file]
    )


# Autoencoder
def mask_vae_batch(
    samples: List[InpaintSample], cfg: RunConfig, step: int
) -> Tuple[torch.Tensor, List[Optional[int]]]:
    """
    Masked inputs for one VAE step.

    Every sample gets patch masking with ratio cosine_ratio(patch_ratio); on top
    of that, one whole frame is zeroed with probability cosine_ratio(frame_ratio).

    Returns:
        Tuple of ((B, 3, N, H, W) inputs, masked frame index per sample or None)
    """
    m = cfg.masking
    if not m.enabled:
        return _clip_batch(samples), [None] * len(samples)
    frame_p = cosine_ratio(step, cfg.steps, *m.frame_ratio)
    patch_r = cosine_ratio(step, cfg.steps, *m.patch_ratio)

    inputs, frames = [], []
    for j, sample in enumerate(samples):
        seed = clip_seed(cfg.seed, step * len(samples) + j)
        masked, _ = patch_mask(sample.clip, m.patch_size, patch_r, seed)
        use_frame = np.random.default_rng(seed).random() < frame_p and sample.clip.n_frames >= 2
        if use_frame:
            masked, index = full_frame_mask(masked, clip_seed(seed, 1))
            frames.append(index)
        else:
            frames.append(None)
        inputs.append(masked.to_tensor())
    return torch.stack(inputs), frames


def _mfi_log_prob(logits: Optional[torch.Tensor], frames: List[Optional[int]]) -> torch.Tensor:
    """log p(true frame) for frame-masked samples, 0 (probability 1) for the rest."""
    if logits is None:
        return torch.zeros(len(frames))
    log_probs = F.log_softmax(logits, dim=-1)
    values = [log_probs[j, f] if f is not None else log_probs.new_zeros(()) for j, f in enumerate(frames)]
    return torch.stack(values)


def fit_vae(
    cfg: RunConfig, samples: List[InpaintSample], output_dir: Optional[Path] = None
) -> Tuple[Vae3d, TrainingLog]:
    seed_everything(cfg.seed)
    n_frames = samples[0].clip.n_frames
    if n_frames != cfg.vae.n_frames:
        raise ValidationError(f"dataset has N={n_frames} frames, vae.n_frames={cfg.vae.n_frames}")

    vae = Vae3d(cfg.vae)
    optimizer, scheduler = build_optimizer(vae.parameters(), cfg.optimizer, cfg.steps)
    targets = _clip_batch(samples)
    log = TrainingLog("vae")

    logger.info(f"Training VAE on {len(samples)} clips for {cfg.steps} steps")
    vae.train()
    for step in tqdm(range(cfg.steps), desc="Training VAE", unit="step"):
        idx = batch_indices(len(samples), cfg.batch_size, step, cfg.seed)
        inputs, frames = mask_vae_batch([samples[i] for i in idx], cfg, step)

        out = vae(inputs)
        report = vae_loss(
            targets[idx],
            out.x_hat,
            out.z_c,
            out.quant.z_q,
            cfg.vae.beta,
            mfi_log_prob_true=_mfi_log_prob(out.mfi_logits, frames),
        )
        parts = report.as_floats()
        check_finite(parts["total"], "vae", step, vae, output_dir)

        optimizer.zero_grad(set_to_none=True)
        report.total.backward()
        if cfg.optimizer.grad_clip:
            nn.utils.clip_grad_norm_(vae.parameters(), cfg.optimizer.grad_clip)
        lr = scheduler.get_last_lr()[0]
        optimizer.step()
        scheduler.step()

        log.add(step, parts["total"], lr, rec=parts["rec"], codebook=parts["codebook"], commit=parts["commit"], mfi=parts["mfi"])
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            logger.info(
                f"vae step {step}: loss={parts['total']:.5f} rec={parts['rec']:.5f} "
                f"codebook={parts['codebook']:.5f} commit={parts['commit']:.5f} mfi={parts['mfi']:.4f} lr={lr:.2e}"
            )
        if output_dir is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_vae(output_dir / f"vae_step{step + 1:06d}.maura", vae)
    return vae.eval(), log


@torch.no_grad()
def evaluate_vae(vae: Vae3d, samples: List[InpaintSample], seed: int = 0) -> MetricReport:
    """Reconstruction PSNR/SSIM, codebook usage and MFI accuracy on the given clips."""
    vae.eval()
    clips = _clip_batch(samples)
    tokens, recon = [], []
    for start in range(0, len(samples), 8):
        z_c = vae.encode(clips[start:start + 8])
        quant = vae.quantize(z_c)
        tokens.append(quant.tokens)
        recon.append(vae.decode(quant.z_q))
    recon_t = torch.cat(recon)

    psnrs = [psnr(clips[i].transpose(0, 1), recon_t[i].transpose(0, 1)) for i in range(len(samples))]
    ssims = [ssim(clips[i].transpose(0, 1), recon_t[i].transpose(0, 1)) for i in range(len(samples))]
    usage = codebook_usage(torch.cat(tokens), vae.codebook_size)

    mfi_acc = None
    if samples[0].clip.n_frames == vae.cfg.n_frames and vae.cfg.n_frames >= 2:
        hits = 0
        for i, sample in enumerate(samples):
            masked, index = full_frame_mask(sample.clip, clip_seed(seed + 1, i))
            probs = vae.frame_index_distribution(vae.encode(masked.to_tensor()[None]))
            hits += int(int(probs.argmax(dim=-1)[0]) == index)
        mfi_acc = hits / len(samples)

    return MetricReport(
        stage="vae",
        psnr=float(np.mean(psnrs)),
        ssim=float(np.mean(ssims)),
        codebook_perplexity=usage.perplexity,
        codebook_usage=usage.fraction_used,
        mfi_accuracy=mfi_acc,
    )


def train_vae(cfg: RunConfig) -> StageResult:
    if cfg.stage != "vae":
        raise ValidationError(f"train_vae needs a 'vae' stage config, got '{cfg.stage}'")
    out = Path(cfg.output_dir)
    samples = load_samples(cfg)
    vae, log = fit_vae(cfg, samples, out)
    checkpoint = out / "vae.maura"
    save_vae(checkpoint, vae, {"seed": cfg.seed, "steps": cfg.steps})
    report = evaluate_vae(vae, samples, cfg.seed)
    logger.info(f"VAE done: PSNR={report.psnr:.2f} dB SSIM={report.ssim:.4f} MFI acc={report.mfi_accuracy}")
    return _finish(cfg, log, report, checkpoint)


# Diffusion
@torch.no_grad()
def tokenize_clips(vae: Vae3d, samples: List[InpaintSample], batch_size: int = 8) -> torch.Tensor:
    """Token grids (M, n, h, w) of every clip, computed once with the frozen autoencoder."""
    vae.eval()
    grids = []
    for start in tqdm(range(0, len(samples), batch_size), desc="Tokenizing", unit="batch", leave=False):
        grids.append(vae.tokenize(_clip_batch(samples[start:start + batch_size])))
    return torch.cat(grids)


def _check_token_cache(tokens: torch.Tensor, codebook_size: int) -> None:
    if int(tokens.min()) < 0 or int(tokens.max()) >= codebook_size:
        raise ValidationError(
            f"token cache range [{int(tokens.min())}, {int(tokens.max())}] does not fit K={codebook_size}"
        )


def fit_diffusion(
    cfg: RunConfig, vae: Vae3d, samples: List[InpaintSample], output_dir: Optional[Path] = None
) -> Tuple[SpectralDenoiser, torch.Tensor, TrainingLog]:
    seed_everything(cfg.seed)
    if cfg.denoiser.codebook_size != vae.codebook_size:
        raise ValidationError(
            f"denoiser.codebook_size={cfg.denoiser.codebook_size} does not match VAE K={vae.codebook_size}"
        )
    tokens = tokenize_clips(vae, samples)
    _check_token_cache(tokens, vae.codebook_size)
    flat = tokens.flatten(1)
    captions = [s.caption for s in samples]
    fps = [s.clip.fps for s in samples]

    denoiser = SpectralDenoiser(cfg.denoiser)
    schedule = build_schedule(cfg.diffusion.T, cfg.diffusion.schedule)
    optimizer, scheduler = build_optimizer(denoiser.parameters(), cfg.optimizer, cfg.steps)
    gen = torch.Generator()
    gen.manual_seed(cfg.seed)
    log = TrainingLog("diffusion")

    logger.info(f"Training denoiser on {len(samples)} clips, grid {tuple(tokens.shape[1:])}, T={schedule.T}")
    denoiser.train()
    for step in tqdm(range(cfg.steps), desc="Training diffusion", unit="step"):
        idx = batch_indices(len(samples), cfg.batch_size, step, cfg.seed)
        z0 = flat[idx]
        t = sample_timesteps(len(idx), schedule.T, gen)
        zt = forward_corrupt_batch(z0, t, schedule, denoiser.mask_id, gen)
        cond = denoiser.condition([captions[i] for i in idx], [fps[i] for i in idx])
        cond.drop = torch.rand(len(idx), generator=gen) < cfg.diffusion.cond_dropout

        logits = denoiser(zt, t, cond)
        loss = diffusion_loss(logits, z0, zt, denoiser.mask_id)
        value = float(loss.value.detach())
        check_finite(value, "diffusion", step, denoiser, output_dir)

        optimizer.zero_grad(set_to_none=True)
        loss.value.backward()
        if cfg.optimizer.grad_clip:
            nn.utils.clip_grad_norm_(denoiser.parameters(), cfg.optimizer.grad_clip)
        lr = scheduler.get_last_lr()[0]
        optimizer.step()
        scheduler.step()

        acc = masked_token_accuracy(logits.detach(), z0, zt, denoiser.mask_id)
        log.add(step, value, lr, token_accuracy=acc)
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            logger.info(f"diffusion step {step}: loss={value:.4f} masked acc={acc} lr={lr:.2e}")
    return denoiser.eval(), tokens, log


@torch.no_grad()
def evaluate_denoiser(
    denoiser: SpectralDenoiser, tokens: torch.Tensor, samples: List[InpaintSample], T: int, schedule_shape: str, seed: int
) -> float:
    """Masked-token accuracy over the train set at t = T/2 with a fixed corruption seed."""
    schedule = build_schedule(T, schedule_shape)
    gen = torch.Generator()
    gen.manual_seed(seed + 1)
    flat = tokens.flatten(1)
    t = torch.full((flat.shape[0],), max(1, T // 2), dtype=torch.long)
    zt = forward_corrupt_batch(flat, t, schedule, denoiser.mask_id, gen)
    cond = denoiser.condition([s.caption for s in samples], [s.clip.fps for s in samples])
    acc = masked_token_accuracy(denoiser(zt, t, cond), flat, zt, denoiser.mask_id)
    return float(acc) if acc is not None else 0.0


def train_diffusion(cfg: RunConfig) -> StageResult:
    if cfg.stage != "diffusion":
        raise ValidationError(f"train_diffusion needs a 'diffusion' stage config, got '{cfg.stage}'")
    out = Path(cfg.output_dir)
    vae = load_vae(cfg.vae_checkpoint)
    for p in vae.parameters():
        p.requires_grad_(False)
    samples = load_samples(cfg)
    denoiser, tokens, log = fit_diffusion(cfg, vae, samples, out)

    schedule = build_schedule(cfg.diffusion.T, cfg.diffusion.schedule)
    checkpoint = out / "diffusion.maura"
    save_diffusion(checkpoint, denoiser, vae, schedule, {"seed": cfg.seed, "steps": cfg.steps})
    usage = codebook_usage(tokens, vae.codebook_size)
    report = MetricReport(
        stage="diffusion",
        token_accuracy=evaluate_denoiser(denoiser, tokens, samples, cfg.diffusion.T, cfg.diffusion.schedule, cfg.seed),
        codebook_perplexity=usage.perplexity,
        codebook_usage=usage.fraction_used,
    )
    logger.info(f"Diffusion done: masked-token accuracy {report.token_accuracy:.3f}")
    return _finish(cfg, log, report, checkpoint)


# Inpainting finetune
@dataclass
class InpaintData:
    z0: torch.Tensor  # (M, n, h, w)
    context: torch.Tensor  # (M, n, h, w) tokens of the pixel-masked clips
    sketches: torch.Tensor  # (M, H, W)
    captions: List[str]
    fps: List[int]


@torch.no_grad()
def prepare_inpaint_data(vae: Vae3d, samples: List[InpaintSample]) -> InpaintData:
    masked = [
        InpaintSample(
            clip=mask_video(s.clip, s.masks), masks=s.masks, sketch=s.sketch, caption=s.caption, spec=s.spec,
            seed=s.seed, id=s.id,
        )
        for s in samples
    ]
    z0 = tokenize_clips(vae, samples)
    context = tokenize_clips(vae, masked)
    _check_token_cache(z0, vae.codebook_size)
    return InpaintData(
        z0=z0,
        context=context,
        sketches=torch.stack([torch.from_numpy(s.sketch.astype(np.float32)) for s in samples]),
        captions=[s.caption for s in samples],
        fps=[s.clip.fps for s in samples],
    )


def fit_inpaint(
    cfg: RunConfig, base: DiffusionBundle, samples: List[InpaintSample], output_dir: Optional[Path] = None
) -> Tuple[InpaintDenoiser, TrainingLog]:
    seed_everything(cfg.seed)
    data = prepare_inpaint_data(base.vae, samples)
    model = build_inpaint_model(base.denoiser, cfg.lora, sketch_enabled=cfg.inpaint.sketch_enabled)
    optimizer, scheduler = build_optimizer(model.parameters(), cfg.optimizer, cfg.steps)
    gen = torch.Generator()
    gen.manual_seed(cfg.seed)
    log = TrainingLog("inpaint")

    logger.info(f"Finetuning rank-{cfg.lora.rank} adapters on {len(samples)} inpaint samples")
    for step in tqdm(range(cfg.steps), desc="Finetuning inpaint", unit="step"):
        idx = batch_indices(len(samples), cfg.batch_size, step, cfg.seed)
        batch = InpaintBatch(
            z0=data.z0[idx],
            cond=InpaintCondition(
                context=data.context[idx],
                text=model.denoiser.condition([data.captions[i] for i in idx], [data.fps[i] for i in idx]),
                sketch=data.sketches[idx],
            ),
        )
        lr = scheduler.get_last_lr()[0]
        result = finetune_step(
            model, batch, optimizer, base.schedule, gen, cfg.optimizer.grad_clip, cfg.diffusion.cond_dropout
        )
        check_finite(result.loss, "inpaint", step, model, output_dir)
        scheduler.step()

        log.add(step, result.loss, lr, token_accuracy=result.token_accuracy)
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            logger.info(f"inpaint step {step}: loss={result.loss:.4f} masked acc={result.token_accuracy} lr={lr:.2e}")
    check_freeze_ledger(model)
    return model.eval(), log


def evaluate_inpaint(
    model: InpaintDenoiser, base: DiffusionBundle, samples: List[InpaintSample], cfg: RunConfig
) -> Tuple[float, float]:
    """Mean masked-region PSNR of conditioned inpainting and of the unconditioned baseline."""
    conditioned, baseline = [], []
    for i, sample in enumerate(samples[: cfg.inpaint.eval_clips]):
        V_m = mask_video(sample.clip, sample.masks)
        kwargs = dict(schedule=base.schedule, steps=cfg.inpaint.eval_steps, seed=cfg.seed + i)
        out = inpaint_sample(model, base.vae, V_m, sample.sketch, sample.caption, cfg_scale=cfg.inpaint.cfg_scale, **kwargs)
        ref = inpaint_sample(model, base.vae, V_m, None, None, cfg_scale=1.0, **kwargs)
        conditioned.append(masked_region_psnr(sample.clip, out, sample.masks))
        baseline.append(masked_region_psnr(sample.clip, ref, sample.masks))
    return float(np.mean(conditioned)), float(np.mean(baseline))


def finetune_inpaint(cfg: RunConfig) -> StageResult:
    if cfg.stage != "inpaint":
        raise ValidationError(f"finetune_inpaint needs an 'inpaint' stage config, got '{cfg.stage}'")
    out = Path(cfg.output_dir)
    base = load_diffusion(cfg.diffusion_checkpoint)
    samples = load_samples(cfg)
    model, log = fit_inpaint(cfg, base, samples, out)

    checkpoint = out / "adapter.maura"
    save_adapter(checkpoint, model, cfg.lora, base.content_hash, {"seed": cfg.seed, "steps": cfg.steps})
    cond_psnr, base_psnr = evaluate_inpaint(model, base, samples, cfg)
    report = MetricReport(
        stage="inpaint",
        masked_region_psnr=cond_psnr,
        baseline_masked_region_psnr=base_psnr,
        extras={
            "adapter_size_ratio": checkpoint.stat().st_size / Path(cfg.diffusion_checkpoint).stat().st_size,
            "base_hash": base.content_hash,
        },
    )
    logger.info(f"Inpaint done: masked-region PSNR {cond_psnr:.2f} dB vs unconditioned {base_psnr:.2f} dB")
    return _finish(cfg, log, report, checkpoint)
