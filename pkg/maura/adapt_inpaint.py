"""
Low-rank adapters and sketch-guided inpainting.

Adapters are L'(x) = L(x) + W_up(GELU(W_down x)) on the self- and cross-attention
key/query projections (parallel) and y + W_up(GELU(W_down y)) after each block's
feed-forward (sequential). Inpainting feeds the denoiser one sequence made of
the diffused tokens, the tokens of the pixel-masked video and the sketch
embedding rows, each tagged with a segment embedding.
"""

import copy
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, Optional, Set, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange
from loguru import logger
from torch import Tensor

from maura.constants import LORA_PLACEMENTS, SPATIAL_DOWNSAMPLE
from maura.container import read_array
from maura.exceptions import FrozenParameterError, ValidationError
from maura.maskdiff import (
    NoiseSchedule,
    diffusion_loss,
    forward_corrupt_batch,
    masked_token_accuracy,
    reverse_sample,
    sample_timesteps,
)
from maura.spectral import DenoiserCondition, SpectralDenoiser
from maura.synthdata import VideoClip

SEGMENT_DIFFUSED, SEGMENT_CONTEXT, SEGMENT_SKETCH = 0, 1, 2


@dataclass
class LoraConfig:
    rank: int = 8
    placements: Tuple[str, ...] = LORA_PLACEMENTS
    scaling: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.placements = tuple(self.placements)
        self.validate()

    def validate(self) -> None:
        if self.rank < 1:
            raise ValidationError(f"LoRA rank={self.rank} must be >= 1")
        if not self.placements:
            raise ValidationError("LoRA placements must be nonempty")
        unknown = [p for p in self.placements if p not in LORA_PLACEMENTS]
        if unknown:
            raise ValidationError(f"Unknown LoRA placements {unknown}, expected a subset of {LORA_PLACEMENTS}")

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["placements"] = list(self.placements)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "LoraConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValidationError(f"Unknown LoraConfig keys: {sorted(unknown)}")
        return cls(**data)


def lora_forward(
    x: Tensor,
    base_layer: nn.Module,
    W_down: Tensor,
    W_up: Tensor,
    placement: str = "parallel",
) -> Tensor:
    """
    Functional adapter.

    Args:
        W_down: (l, d) down projection
        W_up: (d, l) up projection
        placement: 'parallel' (L(x) + branch(x)) or 'sequential' (y + branch(y), y = L(x))
    """
    l, d = W_down.shape
    if l >= d:
        raise ValidationError(f"LoRA rank {l} must be < width {d}")
    if W_up.shape[1] != l:
        raise ValidationError(f"W_up {tuple(W_up.shape)} does not match rank {l}")
    if placement == "parallel":
        return base_layer(x) + F.linear(F.gelu(F.linear(x, W_down)), W_up)
    if placement == "sequential":
        y = base_layer(x)
        return y + F.linear(F.gelu(F.linear(y, W_down)), W_up)
    raise ValidationError(f"Unknown placement '{placement}'")


class LoRABranch(nn.Module):
    """W_up(GELU(W_down x)) * scaling; W_down ~ N(0, std), W_up = 0."""

    def __init__(self, d_in: int, d_out: int, rank: int, std: float, scaling: float = 1.0, generator=None):
        super().__init__()
        if rank >= min(d_in, d_out):
            raise ValidationError(f"LoRA rank {rank} must be < width {min(d_in, d_out)}")
        self.scaling = scaling
        self.down = nn.Linear(d_in, rank, bias=False)
        self.up = nn.Linear(rank, d_out, bias=False)
        with torch.no_grad():
            self.down.weight.copy_(torch.randn(rank, d_in, generator=generator) * std)
            self.up.weight.zero_()

    def forward(self, x: Tensor) -> Tensor:
        out = self.up(F.gelu(self.down(x)))
        return out * self.scaling if self.scaling != 1.0 else out


class ParallelLoRALinear(nn.Module):
    def __init__(self, base: nn.Linear, rank: int, scaling: float = 1.0, generator=None):
        super().__init__()
        self.base = base
        std = float(base.weight.detach().std())
        self.adapter = LoRABranch(base.in_features, base.out_features, rank, std, scaling, generator)

    def forward(self, x: Tensor) -> Tensor:
        return self.base(x) + self.adapter(x)


class SequentialLoRA(nn.Module):
    """Wraps a feed-forward; the branch reads the feed-forward output."""

    def __init__(self, base: nn.Module, width: int, rank: int, scaling: float = 1.0, generator=None):
        super().__init__()
        self.base = base
        std = float(base.fc2.weight.detach().std())
        self.adapter = LoRABranch(width, width, rank, std, scaling, generator)

    def forward(self, x: Tensor) -> Tensor:
        y = self.base(x)
        return y + self.adapter(y)


def attach_adapters(model: SpectralDenoiser, cfg: LoraConfig) -> SpectralDenoiser:
    """
    Adapted view of `model`.

    Parameters are shared with the base model (never copied) and frozen; only
    the new adapter branches are trainable.
    """
    if not isinstance(model, SpectralDenoiser):
        raise ValidationError(f"attach_adapters expects a SpectralDenoiser, got {type(model).__name__}")
    width = model.cfg.width
    if cfg.rank >= width:
        raise ValidationError(f"LoRA rank={cfg.rank} must be < width={width}")

    memo = {id(p): p for p in model.parameters()}
    memo.update({id(b): b for b in model.buffers()})
    adapted = copy.deepcopy(model, memo)
    for p in adapted.parameters():
        p.requires_grad_(False)

    gen = torch.Generator()
    gen.manual_seed(cfg.seed)
    for block in adapted.blocks:
        if "attention_kq" in cfg.placements:
            for attn in (block.self_attn, block.cross_attn):
                attn.k_proj = ParallelLoRALinear(attn.k_proj, cfg.rank, cfg.scaling, gen)
                attn.q_proj = ParallelLoRALinear(attn.q_proj, cfg.rank, cfg.scaling, gen)
        if "feedforward" in cfg.placements:
            block.ff = SequentialLoRA(block.ff, width, cfg.rank, cfg.scaling, gen)

    logger.info(
        f"Attached rank-{cfg.rank} adapters at {list(cfg.placements)}: "
        f"{adapter_parameter_count(adapted):,} trainable parameters"
    )
    return adapted


def adapter_parameter_names(model: nn.Module) -> Set[str]:
    return {name for name, _ in model.named_parameters() if ".adapter." in f".{name}"}


def adapter_parameter_count(model: nn.Module) -> int:
    names = adapter_parameter_names(model)
    return sum(p.numel() for name, p in model.named_parameters() if name in names)


def trainable_parameter_names(model: nn.Module) -> Set[str]:
    return {name for name, p in model.named_parameters() if p.requires_grad}


def mask_video(V: VideoClip, masks: np.ndarray) -> VideoClip:
    """V_m = f_i * (1 - m_i) per frame; masks (N, H, W) with values in {0, 1}."""
    masks = np.asarray(masks)
    if masks.shape != (V.n_frames, V.height, V.width):
        raise ValidationError(f"masks shape {masks.shape} does not match clip (N, H, W)={(V.n_frames, V.height, V.width)}")
    if not np.isin(masks, (0, 1)).all():
        raise ValidationError("mask values must be 0 or 1")
    keep = (1 - masks.astype(np.float32))[:, None, :, :]
    return VideoClip(V.pixels * keep, fps=V.fps)


class SketchEncoder(nn.Module):
    """Toy sketch encoder: non-overlapping p x p patches -> linear -> MLP to width E."""

    def __init__(self, width: int, patch: int = 8, bias: bool = True):
        super().__init__()
        self.patch = patch
        self.width = width
        self.patch_embed = nn.Linear(patch * patch, width, bias=bias)
        self.mlp = nn.Sequential(nn.Linear(width, width, bias=bias), nn.GELU(), nn.Linear(width, width, bias=bias))

    def n_tokens(self, height: int, width: int) -> int:
        return (height // self.patch) * (width // self.patch)

    def forward(self, sketch: Tensor) -> Tensor:
        """(B, H, W) or (B, 1, H, W) -> (B, S', E)."""
        if sketch.ndim == 4:
            if sketch.shape[1] != 1:
                raise ValidationError(f"sketch must be single-channel, got {sketch.shape[1]} channels")
            sketch = sketch[:, 0]
        if sketch.ndim != 3:
            raise ValidationError(f"sketch must be (B, H, W), got {tuple(sketch.shape)}")
        h, w = sketch.shape[1:]
        if h % self.patch or w % self.patch:
            raise ValidationError(f"sketch {h}x{w} not divisible by patch size {self.patch}")
        patches = rearrange(sketch, "b (h p1) (w p2) -> b (h w) (p1 p2)", p1=self.patch, p2=self.patch)
        return self.mlp(self.patch_embed(patches.to(self.patch_embed.weight.dtype)))


@dataclass
class SketchEmbedding:
    embeddings: Tensor  # (S', E)

    def __post_init__(self):
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] < 1:
            raise ValidationError(f"sketch embedding must be (S' >= 1, E), got {tuple(self.embeddings.shape)}")


def sketch_encode(sketch: Union[np.ndarray, Tensor], encoder: SketchEncoder) -> SketchEmbedding:
    sketch_t = torch.as_tensor(np.asarray(sketch) if not isinstance(sketch, Tensor) else sketch).float()
    if sketch_t.ndim == 3 and sketch_t.shape[0] == 1:
        sketch_t = sketch_t[0]
    if sketch_t.ndim != 2:
        raise ValidationError(f"sketch must be a single-channel 2D map, got {tuple(sketch_t.shape)}")
    return SketchEmbedding(encoder(sketch_t[None])[0])


def load_sketch_embeddings(path: Union[str, Path]) -> SketchEmbedding:
    """Externally precomputed (S', E) float32 MAURA1 array."""
    arr = read_array(path)
    if arr.ndim != 2 or arr.dtype.kind != "f":
        raise ValidationError(f"{path}: sketch embeddings must be a 2D float32 array, got {arr.dtype} {arr.shape}")
    return SketchEmbedding(torch.from_numpy(arr.copy()))


@dataclass
class InpaintCondition:
    """
    Composite conditioning: context tokens of the masked video, text and sketch.

    sketch_embeddings (B, S', E) override the toy sketch encoder when given.
    """

    context: Tensor  # (B, n, h, w) tokens of V_m
    text: DenoiserCondition
    sketch: Optional[Tensor] = None  # (B, H, W) float edge maps
    sketch_embeddings: Optional[Tensor] = None

    def unconditional(self) -> "InpaintCondition":
        return InpaintCondition(context=self.context, text=self.text.unconditional())


class InpaintDenoiser(nn.Module):
    """Adapted denoiser over [diffused | context | sketch] sequences; logits for the diffused half."""

    def __init__(self, denoiser: SpectralDenoiser, sketch_patch: int = 8, sketch_enabled: bool = True):
        super().__init__()
        self.denoiser = denoiser
        width = denoiser.cfg.width
        self.sketch_enabled = sketch_enabled
        self.sketch_encoder = SketchEncoder(width, sketch_patch)
        self.segment_embed = nn.Embedding(3, width)
        nn.init.normal_(self.segment_embed.weight, std=0.02)

    @property
    def codebook_size(self) -> int:
        return self.denoiser.cfg.codebook_size

    @property
    def mask_id(self) -> int:
        return self.denoiser.mask_id

    def declared_trainable_names(self) -> Set[str]:
        """Adapters plus the condition embeddings (segment table and sketch encoder)."""
        names = {f"denoiser.{n}" for n in adapter_parameter_names(self.denoiser)}
        names |= {f"segment_embed.{n}" for n, _ in self.segment_embed.named_parameters()}
        names |= {f"sketch_encoder.{n}" for n, _ in self.sketch_encoder.named_parameters()}
        return names

    def build_input_sequence(self, z_T: Tensor, z_m: Tensor, sketch: Optional[Tensor]) -> Tensor:
        """
        Args:
            z_T: (B, n, h, w) diffused tokens (MASK_ID allowed)
            z_m: (B, n, h, w) tokens of the masked video (no MASK_ID)
            sketch: (B, S', E) sketch rows, or None to drop the branch

        Returns:
            (B, 2 |grid| + S', E)
        """
        if z_T.shape != z_m.shape:
            raise ValidationError(f"grid shapes differ: z_T {tuple(z_T.shape)} vs z_m {tuple(z_m.shape)}")
        if bool((z_m == self.mask_id).any()):
            raise ValidationError("context tokens z_m must not contain MASK_ID")
        diffused = self.denoiser.embed(z_T.flatten(1)) + self.segment_embed.weight[SEGMENT_DIFFUSED]
        context = self.denoiser.embed(z_m.flatten(1)) + self.segment_embed.weight[SEGMENT_CONTEXT]
        parts = [diffused, context]
        if sketch is not None:
            parts.append(sketch.to(diffused.dtype) + self.segment_embed.weight[SEGMENT_SKETCH])
        return torch.cat(parts, dim=1)

    def sketch_rows(self, cond: InpaintCondition, batch: int, dtype: torch.dtype) -> Optional[Tensor]:
        if not self.sketch_enabled:
            return None
        if cond.sketch_embeddings is not None:
            rows = cond.sketch_embeddings.to(dtype)
        elif cond.sketch is not None:
            rows = self.sketch_encoder(cond.sketch).to(dtype)
        else:
            _, _, h, w = cond.context.shape
            n = self.sketch_encoder.n_tokens(h * SPATIAL_DOWNSAMPLE, w * SPATIAL_DOWNSAMPLE)
            rows = torch.zeros(batch, n, self.denoiser.cfg.width, dtype=dtype)
        if cond.text.drop is not None:
            rows = rows * (~cond.text.drop.bool()).to(dtype)[:, None, None]
        return rows

    def forward(self, z: Tensor, t: Tensor, cond: InpaintCondition) -> Tensor:
        """z (B, |grid|) diffused tokens -> (B, |grid|, K) logits."""
        batch = z.shape[0]
        grid = tuple(cond.context.shape[1:])
        n_diffused = int(np.prod(grid))
        if z.shape[1] != n_diffused:
            raise ValidationError(f"diffused length {z.shape[1]} does not match context grid {grid}")
        dtype = self.segment_embed.weight.dtype
        h = self.build_input_sequence(z.reshape((batch,) + grid), cond.context, self.sketch_rows(cond, batch, dtype))
        hidden = self.denoiser.forward_embeddings(h, t, cond.text)
        return self.denoiser.head(hidden[:, :n_diffused])


def build_inpaint_model(base: SpectralDenoiser, cfg: LoraConfig, sketch_enabled: bool = True) -> InpaintDenoiser:
    model = InpaintDenoiser(attach_adapters(base, cfg), sketch_enabled=sketch_enabled)
    check_freeze_ledger(model)
    return model


def check_freeze_ledger(model: InpaintDenoiser) -> None:
    trainable = trainable_parameter_names(model)
    declared = model.declared_trainable_names()
    if trainable != declared:
        raise FrozenParameterError(
            f"trainable set differs from declared adapters: extra={sorted(trainable - declared)}, "
            f"missing={sorted(declared - trainable)}"
        )


@dataclass
class InpaintBatch:
    z0: Tensor  # (B, n, h, w) clean tokens
    cond: InpaintCondition


@dataclass
class FinetuneStepResult:
    loss: float
    n_masked: int
    token_accuracy: Optional[float] = None
    grad_norm: float = 0.0
    extras: Dict = field(default_factory=dict)


def finetune_step(
    model: InpaintDenoiser,
    batch: InpaintBatch,
    optimizer: torch.optim.Optimizer,
    schedule: NoiseSchedule,
    generator: torch.Generator,
    grad_clip: Optional[float] = None,
    cond_dropout: float = 0.0,
) -> FinetuneStepResult:
    """One optimizer step on adapters and condition embeddings; base arrays stay untouched."""
    model.train()
    z0 = batch.z0.flatten(1)
    t = sample_timesteps(z0.shape[0], schedule.T, generator)
    zt = forward_corrupt_batch(z0, t, schedule, model.mask_id, generator)

    cond = batch.cond
    if cond_dropout > 0:
        drop = torch.rand(z0.shape[0], generator=generator) < cond_dropout
        cond = InpaintCondition(
            context=cond.context,
            text=DenoiserCondition(fps=cond.text.fps, text=cond.text.text, text_mask=cond.text.text_mask, drop=drop),
            sketch=cond.sketch,
            sketch_embeddings=cond.sketch_embeddings,
        )

    optimizer.zero_grad(set_to_none=True)
    logits = model(zt, t, cond)
    loss = diffusion_loss(logits, z0, zt, model.mask_id)
    loss.value.backward()

    for name, p in model.denoiser.named_parameters():
        if not p.requires_grad and p.grad is not None:
            raise FrozenParameterError(f"gradient reached frozen base parameter '{name}'")

    params = [p for p in model.parameters() if p.requires_grad]
    grad_norm = float(nn.utils.clip_grad_norm_(params, grad_clip)) if grad_clip else 0.0
    optimizer.step()
    return FinetuneStepResult(
        loss=float(loss.value.detach()),
        n_masked=loss.n_masked,
        token_accuracy=masked_token_accuracy(logits.detach(), z0, zt, model.mask_id),
        grad_norm=grad_norm,
    )


def inpaint_sample(
    model: InpaintDenoiser,
    vae,
    V_m: VideoClip,
    sketch: Union[np.ndarray, Tensor, SketchEmbedding, None],
    caption: Optional[str],
    schedule: NoiseSchedule,
    steps: int,
    cfg_scale: float,
    seed: int,
    masks: Optional[np.ndarray] = None,
    composite: bool = False,
) -> VideoClip:
    """
    Inpaint a pixel-masked clip.

    Args:
        vae: Frozen Vae3d used to tokenize V_m and decode the result
        sketch: (H, W) edge map, precomputed SketchEmbedding, or None for no sketch
        caption: Text prompt, or None for the null text
        masks: (N, H, W) {0,1} inpaint masks, required when composite is set
        composite: Copy V_m pixels outside the mask into the output
    """
    if composite and masks is None:
        raise ValidationError("composite=True needs the pixel masks")
    model.eval()
    with torch.no_grad():
        z_m = vae.tokenize(V_m.to_tensor()[None])
        fps = torch.tensor([V_m.fps], dtype=torch.long)
        if caption is None:
            text = DenoiserCondition(fps=fps)
        else:
            text = model.denoiser.condition([caption], V_m.fps)

        if sketch is None:
            cond = InpaintCondition(context=z_m, text=text)
        elif isinstance(sketch, SketchEmbedding):
            cond = InpaintCondition(context=z_m, text=text, sketch_embeddings=sketch.embeddings[None])
        else:
            sketch_t = torch.as_tensor(np.asarray(sketch) if not isinstance(sketch, Tensor) else sketch).float()
            cond = InpaintCondition(context=z_m, text=text, sketch=sketch_t[None])

        tokens = reverse_sample(
            model,
            cond,
            schedule,
            steps=steps,
            cfg_scale=cfg_scale,
            seed=seed,
            grid_shape=tuple(z_m.shape[1:]),
            codebook_size=model.codebook_size,
            unconditional=cond.unconditional(),
        )
        pixels = vae.detokenize(tokens)[0]

    out = VideoClip.from_tensor(pixels, fps=V_m.fps)
    if composite:
        keep = (np.asarray(masks) == 0)[:, None, :, :]
        out = VideoClip(np.where(keep, V_m.pixels, out.pixels).astype(np.float32), fps=out.fps)
    return out
