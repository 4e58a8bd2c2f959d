#!/usr/bin/env python3
"""
Reconstruction metrics and the per-run metric report.
"""

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np
import torch
import torch.nn.functional as F
from loguru import logger
from torch import Tensor

from maura.constants import PSNR_CAP_DB, PSNR_MIN_MSE, SSIM_K1, SSIM_K2, SSIM_WINDOW, UNAVAILABLE_METRICS
from maura.container import atomic_write_bytes
from maura.exceptions import ValidationError
from maura.synthdata import VideoClip

ClipLike = Union[VideoClip, np.ndarray, Tensor]


def _frames(x: ClipLike) -> Tensor:
    """(N, C, H, W) float64 frames."""
    if isinstance(x, VideoClip):
        x = x.pixels
    t = torch.as_tensor(np.asarray(x) if not isinstance(x, Tensor) else x).detach().to(torch.float64).cpu()
    if t.ndim == 3:
        t = t[None]
    if t.ndim != 4:
        raise ValidationError(f"expected (N, C, H, W) frames, got {tuple(t.shape)}")
    return t


def _pair(a: ClipLike, b: ClipLike):
    fa, fb = _frames(a), _frames(b)
    if fa.shape != fb.shape:
        raise ValidationError(f"shape mismatch: {tuple(fa.shape)} vs {tuple(fb.shape)}")
    return fa, fb


def psnr_from_mse(mse: float) -> float:
    if mse < PSNR_MIN_MSE:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))


def psnr(a: ClipLike, b: ClipLike) -> float:
    """10 log10(1 / MSE) with peak 1.0; 99 dB when MSE < 1e-10."""
    fa, fb = _pair(a, b)
    return psnr_from_mse(float(((fa - fb) ** 2).mean()))


def masked_region_psnr(a: ClipLike, b: ClipLike, masks: np.ndarray) -> float:
    """PSNR restricted to pixels where masks (N, H, W) == 1."""
    fa, fb = _pair(a, b)
    m = torch.as_tensor(np.asarray(masks), dtype=torch.float64)
    if m.shape != (fa.shape[0], fa.shape[2], fa.shape[3]):
        raise ValidationError(f"masks shape {tuple(m.shape)} does not match frames {tuple(fa.shape)}")
    weight = m[:, None].expand_as(fa)
    if float(weight.sum()) == 0:
        raise ValidationError("mask selects no pixels")
    return psnr_from_mse(float((((fa - fb) ** 2) * weight).sum() / weight.sum()))


def ssim(a: ClipLike, b: ClipLike, window: int = SSIM_WINDOW) -> float:
    """
    Mean SSIM over 8x8 sliding windows, computed per frame and averaged.

    Uses K1 = 0.01, K2 = 0.03 and a dynamic range of 1.0.
    """
    fa, fb = _pair(a, b)
    if fa.shape[2] < window or fa.shape[3] < window:
        raise ValidationError(f"frames {fa.shape[2]}x{fa.shape[3]} smaller than the {window}x{window} window")
    c1, c2 = SSIM_K1**2, SSIM_K2**2

    def pool(x: Tensor) -> Tensor:
        return F.avg_pool2d(x, window, stride=1)

    mu_a, mu_b = pool(fa), pool(fb)
    var_a = pool(fa * fa) - mu_a**2
    var_b = pool(fb * fb) - mu_b**2
    cov = pool(fa * fb) - mu_a * mu_b
    ssim_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    per_frame = ssim_map.flatten(1).mean(dim=1)
    return float(per_frame.mean().clamp(-1.0, 1.0))


@dataclass
class MetricReport:
    """Metrics gathered at the end of a stage; fields a stage does not produce stay None."""

    stage: str
    psnr: Optional[float] = None
    ssim: Optional[float] = None
    codebook_perplexity: Optional[float] = None
    codebook_usage: Optional[float] = None
    mfi_accuracy: Optional[float] = None
    token_accuracy: Optional[float] = None
    masked_region_psnr: Optional[float] = None
    baseline_masked_region_psnr: Optional[float] = None
    final_loss: Optional[float] = None
    loss_curve_file: Optional[str] = None
    extras: Dict = field(default_factory=dict)

    def __post_init__(self):
        if self.psnr is not None and self.psnr > PSNR_CAP_DB:
            raise ValidationError(f"psnr={self.psnr} above the {PSNR_CAP_DB} dB cap")
        if self.ssim is not None and not -1.0 <= self.ssim <= 1.0:
            raise ValidationError(f"ssim={self.ssim} outside [-1, 1]")

    def to_dict(self) -> Dict:
        data = asdict(self)
        data.update({name: "unavailable" for name in UNAVAILABLE_METRICS})
        return data


def write_metrics(report: MetricReport, path: Union[str, Path]) -> Path:
    path = atomic_write_bytes(path, json.dumps(report.to_dict(), indent=2, sort_keys=True).encode("utf-8"))
    logger.info(f"Wrote metrics to {path}")
    return path
