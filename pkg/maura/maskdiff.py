"""
Absorbing mask-token diffusion over token grids.

Forward: every position independently becomes MASK_ID (= K) with probability
m̄_t. A single uniform draw per position is thresholded, so under a shared
seed the masked set only grows with t.

Reverse: start from an all-MASK grid and commit tokens in order of model
confidence so that the remaining masked count follows m̄ resampled at the
requested number of steps. Committed tokens are never re-masked.
"""

import math
from dataclasses import dataclass
from typing import Any, Callable, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from loguru import logger
from torch import Tensor

from maura.constants import DEFAULT_CFG_SCALE
from maura.exceptions import ValidationError

# (z (B, S) long, t (B,) long, conditioning or None) -> logits (B, S, K)
Denoiser = Callable[[Tensor, Tensor, Any], Tensor]

SCHEDULE_SHAPES = ("linear", "cosine")


@dataclass(frozen=True)
class NoiseSchedule:
    """
    Cumulative and per-step mask probabilities.

    cumulative[t] = m̄_t for t = 0..T; gamma[t] = P(mask at t | unmasked at t-1)
    for t = 1..T, with gamma[0] = 0.
    """

    T: int
    shape: str
    cumulative: np.ndarray
    gamma: np.ndarray

    def cumulative_at(self, t: float) -> float:
        """m̄ at a real-valued step in [0, T]."""
        if not 0.0 <= t <= self.T:
            raise ValidationError(f"t={t} outside [0, {self.T}]")
        if self.shape == "linear":
            return t / self.T
        return math.sin(math.pi * t / (2 * self.T)) ** 2


def build_schedule(T: int, shape: str = "linear") -> NoiseSchedule:
    """
    Args:
        T: Number of diffusion steps (>= 1)
        shape: 'linear' (m̄_t = t / T) or 'cosine' (m̄_t = sin²(pi t / 2T))
    """
    if T < 1:
        raise ValidationError(f"T={T} must be >= 1")
    if shape not in SCHEDULE_SHAPES:
        raise ValidationError(f"schedule shape '{shape}' must be one of {SCHEDULE_SHAPES}")

    steps = np.arange(T + 1, dtype=np.float64)
    if shape == "linear":
        cumulative = steps / T
    else:
        cumulative = np.sin(np.pi * steps / (2 * T)) ** 2
    cumulative[0], cumulative[T] = 0.0, 1.0

    gamma = np.zeros(T + 1, dtype=np.float64)
    gamma[1:] = (cumulative[1:] - cumulative[:-1]) / (1.0 - cumulative[:-1])
    return NoiseSchedule(T=T, shape=shape, cumulative=cumulative, gamma=gamma)


def _generator(seed: Optional[int], generator: Optional[torch.Generator]) -> torch.Generator:
    if generator is not None:
        return generator
    gen = torch.Generator()
    gen.manual_seed(0 if seed is None else int(seed))
    return gen


def _check_no_mask(z0: Tensor, mask_id: int) -> None:
    if bool((z0 == mask_id).any()):
        raise ValidationError(f"z_0 must not contain MASK_ID={mask_id}")
    if z0.numel() and (int(z0.min()) < 0 or int(z0.max()) > mask_id):
        raise ValidationError(f"z_0 indices outside [0, {mask_id - 1}]")


def forward_corrupt(
    z0: Tensor,
    t: int,
    schedule: NoiseSchedule,
    mask_id: int,
    seed: Optional[int] = None,
    generator: Optional[torch.Generator] = None,
) -> Tensor:
    """Sample z_t ~ q(z_t | z_0) directly from the t-step marginal."""
    if not 0 <= t <= schedule.T:
        raise ValidationError(f"t={t} outside [0, {schedule.T}]")
    _check_no_mask(z0, mask_id)
    u = torch.rand(z0.shape, generator=_generator(seed, generator), dtype=torch.float64)
    masked = (u < schedule.cumulative[t]).to(z0.device)
    return torch.where(masked, torch.full_like(z0, mask_id), z0)


def forward_corrupt_batch(
    z0: Tensor,
    t: Tensor,
    schedule: NoiseSchedule,
    mask_id: int,
    generator: Optional[torch.Generator] = None,
) -> Tensor:
    """Per-sample t: z0 (B, ...), t (B,) -> z_t (B, ...)."""
    if t.shape != (z0.shape[0],):
        raise ValidationError(f"t shape {tuple(t.shape)} must be ({z0.shape[0]},)")
    if int(t.min()) < 0 or int(t.max()) > schedule.T:
        raise ValidationError(f"t values outside [0, {schedule.T}]")
    _check_no_mask(z0, mask_id)
    u = torch.rand(z0.shape, generator=_generator(None, generator), dtype=torch.float64)
    thresholds = torch.as_tensor(schedule.cumulative, dtype=torch.float64)[t.cpu().long()]
    thresholds = thresholds.reshape((-1,) + (1,) * (z0.ndim - 1))
    masked = (u < thresholds).to(z0.device)
    return torch.where(masked, torch.full_like(z0, mask_id), z0)


def forward_corrupt_stepwise(
    z0: Tensor,
    t: int,
    schedule: NoiseSchedule,
    mask_id: int,
    seed: Optional[int] = None,
) -> Tensor:
    """Apply the per-step conditionals gamma_1..gamma_t in sequence."""
    if not 0 <= t <= schedule.T:
        raise ValidationError(f"t={t} outside [0, {schedule.T}]")
    _check_no_mask(z0, mask_id)
    gen = _generator(seed, None)
    z = z0.clone()
    for step in range(1, t + 1):
        u = torch.rand(z.shape, generator=gen, dtype=torch.float64)
        z = torch.where(u < schedule.gamma[step], torch.full_like(z, mask_id), z)
    return z


def sample_timesteps(batch_size: int, T: int, generator: Optional[torch.Generator] = None) -> Tensor:
    """t ~ Uniform{1..T}."""
    return torch.randint(1, T + 1, (batch_size,), generator=_generator(None, generator))


@dataclass
class DiffusionLoss:
    """Mean NLL over masked positions; n_masked == 0 flags an empty mask set."""

    value: Tensor
    n_masked: int

    @property
    def empty(self) -> bool:
        return self.n_masked == 0


def diffusion_loss(logits: Tensor, z0: Tensor, zt: Tensor, mask_id: int) -> DiffusionLoss:
    """
    Args:
        logits: (..., K) denoiser output
        z0: (...) clean tokens
        zt: (...) corrupted tokens
        mask_id: MASK_ID
    """
    if logits.shape[:-1] != z0.shape or z0.shape != zt.shape:
        raise ValidationError(
            f"inconsistent shapes: logits {tuple(logits.shape)}, z0 {tuple(z0.shape)}, zt {tuple(zt.shape)}"
        )
    masked = zt == mask_id
    n_masked = int(masked.sum())
    if n_masked == 0:
        logger.warning("diffusion_loss called with no masked positions, returning 0")
        return DiffusionLoss(value=logits.sum() * 0.0, n_masked=0)
    value = F.cross_entropy(logits[masked], z0[masked].long())
    return DiffusionLoss(value=value, n_masked=n_masked)


def masked_token_accuracy(logits: Tensor, z0: Tensor, zt: Tensor, mask_id: int) -> Optional[float]:
    masked = zt == mask_id
    if not bool(masked.any()):
        return None
    return float((logits.argmax(dim=-1)[masked] == z0[masked]).float().mean())


def cfg_combine(logits_cond: Tensor, logits_uncond: Tensor, scale: float = DEFAULT_CFG_SCALE) -> Tensor:
    """logits_uncond + scale * (logits_cond - logits_uncond)."""
    if logits_cond.shape != logits_uncond.shape:
        raise ValidationError(
            f"cond {tuple(logits_cond.shape)} and uncond {tuple(logits_uncond.shape)} logits differ in shape"
        )
    return logits_uncond + scale * (logits_cond - logits_uncond)


def _masked_target(schedule: NoiseSchedule, steps: int, i: int, n_positions: int) -> int:
    """Positions still masked after reverse step i of `steps`."""
    remaining = schedule.T * (steps - i - 1) / steps
    return int(math.floor(schedule.cumulative_at(remaining) * n_positions))


def _timestep(schedule: NoiseSchedule, steps: int, i: int) -> int:
    return max(1, min(schedule.T, round(schedule.T * (steps - i) / steps)))


def reverse_sample(
    denoiser: Denoiser,
    conditioning: Any,
    schedule: NoiseSchedule,
    steps: int,
    cfg_scale: float,
    seed: int,
    grid_shape: Union[int, Sequence[int]],
    codebook_size: int,
    batch_size: int = 1,
    temperature: float = 1.0,
    argmax: bool = False,
    unconditional: Any = None,
) -> Tensor:
    """
    Iterative confidence-ordered unmasking.

    Args:
        denoiser: Callable (z, t, cond) -> (B, S, K) logits
        conditioning: Passed to the conditional branch
        schedule: Training schedule, resampled at `steps`
        steps: Reverse steps (>= 1)
        cfg_scale: Guidance scale; 1 skips the unconditional branch
        seed: Sampler seed
        grid_shape: Token grid shape (n, h, w) or a flat length S
        codebook_size: K; MASK_ID = K
        unconditional: Conditioning of the unconditional branch (default None)

    Returns:
        (B, *grid_shape) long tensor free of MASK_ID
    """
    if steps < 1:
        raise ValidationError(f"steps={steps} must be >= 1")
    if temperature <= 0:
        raise ValidationError(f"temperature={temperature} must be > 0")
    grid: Tuple[int, ...] = (grid_shape,) if isinstance(grid_shape, int) else tuple(grid_shape)
    n_positions = int(np.prod(grid))
    mask_id = codebook_size
    gen = _generator(seed, None)

    z = torch.full((batch_size, n_positions), mask_id, dtype=torch.long)
    for i in range(steps):
        t = torch.full((batch_size,), _timestep(schedule, steps, i), dtype=torch.long)
        logits = denoiser(z, t, conditioning)
        if logits.shape != (batch_size, n_positions, codebook_size):
            raise ValidationError(
                f"denoiser returned {tuple(logits.shape)}, expected {(batch_size, n_positions, codebook_size)}"
            )
        if cfg_scale != 1.0:
            logits = cfg_combine(logits, denoiser(z, t, unconditional), cfg_scale)
        logits = logits.detach().double().cpu()

        probs = torch.softmax(logits / temperature, dim=-1)
        if argmax:
            confidence, candidates = probs.max(dim=-1)
        else:
            candidates = torch.multinomial(probs.reshape(-1, codebook_size), 1, generator=gen)
            candidates = candidates.reshape(batch_size, n_positions)
            confidence = probs.gather(-1, candidates[..., None])[..., 0]

        target = _masked_target(schedule, steps, i, n_positions)
        for b in range(batch_size):
            masked_idx = torch.nonzero(z[b] == mask_id, as_tuple=False)[:, 0]
            n_commit = max(0, masked_idx.numel() - target)
            if n_commit == 0:
                continue
            order = torch.sort(confidence[b, masked_idx], descending=True, stable=True).indices
            commit = masked_idx[order[:n_commit]]
            z[b, commit] = candidates[b, commit]
        logger.debug(f"reverse step {i + 1}/{steps}: t={int(t[0])}, still masked {int((z == mask_id).sum())}")

    return z.reshape((batch_size,) + grid)
