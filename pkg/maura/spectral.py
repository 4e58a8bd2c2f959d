"""
Spectral Transformer denoiser.

Each block runs Fourier-domain self-attention, Fourier-domain cross-attention
over text states and a GELU feed-forward, all conditioned on the diffusion
step and frame rate through adaptive layer norm (AdLN). The 2D transform is two
chained 1D DFTs over the (sequence, embedding) axes, keeping the real part only.
"""

import hashlib
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange
from loguru import logger
from torch import Tensor

from maura.constants import (
    CAPTION_GRAMMAR,
    DEFAULT_DIFFUSION_STEPS,
    DEFAULT_FPS,
    DENOISER_PRESETS,
    FPS_VOCAB_SIZE,
    PAD_TOKEN,
    UNK_TOKEN,
)
from maura.container import read_array
from maura.exceptions import ValidationError


def fft2d_real(x: Tensor) -> Tensor:
    """Re(DFT_seq(DFT_emb(x))) over the last two axes (S, E); unnormalized."""
    return torch.fft.fft(torch.fft.fft(x, dim=-1), dim=-2).real


def ifft2d_real(x: Tensor) -> Tensor:
    """Re(IDFT_emb(IDFT_seq(x))) with 1 / (S E) normalization."""
    return torch.fft.ifft(torch.fft.ifft(x, dim=-2), dim=-1).real


def sinusoidal_embedding(positions: Tensor, dim: int, dtype: torch.dtype = torch.float32) -> Tensor:
    """(...,) integer or real positions -> (..., dim) [sin | cos] features."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    angles = positions.to(torch.float64)[..., None] * freqs.to(positions.device)
    emb = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb.to(dtype)


def rope_apply(x: Tensor, positions: Union[int, Tensor]) -> Tensor:
    """
    Rotary position embedding on the last axis.

    Pair (x_2j, x_2j+1) is rotated by position * theta_j, theta_j = 10000^(-2j/d).

    Args:
        x: (..., S, d) per-head vectors, or (..., d) when positions is an int
        positions: int or (S,) tensor of positions
    """
    d = x.shape[-1]
    if d % 2:
        raise ValidationError(f"RoPE needs an even head dim, got {d}")
    theta = 10000.0 ** (-2.0 * torch.arange(d // 2, dtype=torch.float64) / d)
    if isinstance(positions, int):
        angles = positions * theta
    else:
        angles = positions.to(torch.float64).cpu()[:, None] * theta[None, :]
    cos = torch.cos(angles).to(dtype=x.dtype, device=x.device)
    sin = torch.sin(angles).to(dtype=x.dtype, device=x.device)

    x_even, x_odd = x[..., 0::2], x[..., 1::2]
    rotated = torch.stack([x_even * cos - x_odd * sin, x_even * sin + x_odd * cos], dim=-1)
    return rotated.flatten(-2)


@dataclass
class CondSignal:
    """Diffusion step and frame rate per batch item."""

    t: Tensor  # (B,)
    fps: Tensor  # (B,)


class AdLN(nn.Module):
    """
    y = LayerNorm(x) * (1 + gamma(c)) + beta(c), c = [sinusoidal(t) | fps embedding].

    The modulation layer starts at zero so a fresh AdLN is a plain LayerNorm.
    """

    def __init__(
        self,
        width: int,
        max_steps: int = DEFAULT_DIFFUSION_STEPS,
        fps_vocab: int = FPS_VOCAB_SIZE,
        t_dim: int = 32,
        fps_dim: int = 16,
    ):
        super().__init__()
        self.max_steps = max_steps
        self.fps_vocab = fps_vocab
        self.t_dim = t_dim
        self.norm = nn.LayerNorm(width, eps=1e-6, elementwise_affine=False)
        self.fps_embed = nn.Embedding(fps_vocab + 1, fps_dim)  # row 0 unused
        self.modulation = nn.Sequential(nn.SiLU(), nn.Linear(t_dim + fps_dim, 2 * width))
        nn.init.zeros_(self.modulation[1].weight)
        nn.init.zeros_(self.modulation[1].bias)

    def condition(self, cond: CondSignal, dtype: torch.dtype) -> Tensor:
        fps = cond.fps.long()
        if int(fps.min()) < 1 or int(fps.max()) > self.fps_vocab:
            raise ValidationError(f"fps values {fps.tolist()} outside vocabulary 1..{self.fps_vocab}")
        if int(cond.t.min()) < 0 or int(cond.t.max()) > self.max_steps:
            raise ValidationError(f"t values {cond.t.tolist()} outside [0, {self.max_steps}]")
        t_emb = sinusoidal_embedding(cond.t, self.t_dim, dtype=dtype)
        return torch.cat([t_emb, self.fps_embed(fps).to(dtype)], dim=-1)

    def forward(self, x: Tensor, cond: CondSignal) -> Tensor:
        gamma, beta = self.modulation(self.condition(cond, x.dtype)).chunk(2, dim=-1)
        return self.norm(x) * (1 + gamma[:, None, :]) + beta[:, None, :]


def _attend(q: Tensor, k: Tensor, v: Tensor, key_mask: Optional[Tensor]) -> Tuple[Tensor, Tensor]:
    """(B, h, S, d) q against (B, h, L, d) k/v; key_mask (B, L) marks valid keys."""
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    return weights @ v, weights


class SpectralSelfAttention(nn.Module):
    """adln_out(ifft(W_o MSA(fft(h))) + h), h = adln_in(z)."""

    def __init__(self, width: int, heads: int, fft_enabled: bool = True, rope_enabled: bool = True, **adln_kwargs):
        super().__init__()
        if width % heads:
            raise ValidationError(f"width={width} must be divisible by heads={heads}")
        self.heads = heads
        self.fft_enabled = fft_enabled
        self.rope_enabled = rope_enabled
        self.adln_in = AdLN(width, **adln_kwargs)
        self.adln_out = AdLN(width, **adln_kwargs)
        self.q_proj = nn.Linear(width, width)
        self.k_proj = nn.Linear(width, width)
        self.v_proj = nn.Linear(width, width)
        self.out_proj = nn.Linear(width, width)

    def forward(
        self,
        z: Tensor,
        cond: CondSignal,
        positions: Optional[Tensor] = None,
        return_attention: bool = False,
    ):
        h = self.adln_in(z, cond)
        f = fft2d_real(h) if self.fft_enabled else h

        q = rearrange(self.q_proj(f), "b s (h d) -> b h s d", h=self.heads)
        k = rearrange(self.k_proj(f), "b s (h d) -> b h s d", h=self.heads)
        v = rearrange(self.v_proj(f), "b s (h d) -> b h s d", h=self.heads)
        if self.rope_enabled:
            if positions is None:
                positions = torch.arange(z.shape[1])
            q, k = rope_apply(q, positions), rope_apply(k, positions)

        attended, weights = _attend(q, k, v, None)
        o = self.out_proj(rearrange(attended, "b h s d -> b s (h d)"))
        if self.fft_enabled:
            o = ifft2d_real(o)
        out = self.adln_out(o + h, cond)
        return (out, weights) if return_attention else out


class SpectralCrossAttention(nn.Module):
    """Queries from fft(z_out), keys and values from fft(text); adln_out(ifft(.) + adln_res(z_out))."""

    def __init__(self, width: int, heads: int, fft_enabled: bool = True, **adln_kwargs):
        super().__init__()
        if width % heads:
            raise ValidationError(f"width={width} must be divisible by heads={heads}")
        self.heads = heads
        self.fft_enabled = fft_enabled
        self.adln_res = AdLN(width, **adln_kwargs)
        self.adln_out = AdLN(width, **adln_kwargs)
        self.q_proj = nn.Linear(width, width)
        self.k_proj = nn.Linear(width, width)
        self.v_proj = nn.Linear(width, width)
        self.out_proj = nn.Linear(width, width)

    def forward(
        self,
        z_out: Tensor,
        text: Tensor,
        cond: CondSignal,
        text_mask: Optional[Tensor] = None,
        return_attention: bool = False,
    ):
        fz = fft2d_real(z_out) if self.fft_enabled else z_out
        ft = fft2d_real(text) if self.fft_enabled else text

        q = rearrange(self.q_proj(fz), "b s (h d) -> b h s d", h=self.heads)
        k = rearrange(self.k_proj(ft), "b l (h d) -> b h l d", h=self.heads)
        v = rearrange(self.v_proj(ft), "b l (h d) -> b h l d", h=self.heads)

        # padded text rows are zeroed before the transform; spectral rows are not token slots
        key_mask = None if self.fft_enabled else text_mask
        attended, weights = _attend(q, k, v, key_mask)
        o = self.out_proj(rearrange(attended, "b h s d -> b s (h d)"))
        if self.fft_enabled:
            o = ifft2d_real(o)
        out = self.adln_out(o + self.adln_res(z_out, cond), cond)
        return (out, weights) if return_attention else out


class FeedForward(nn.Module):
    def __init__(self, width: int, expansion: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(width, expansion * width)
        self.fc2 = nn.Linear(expansion * width, width)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class SpectralBlock(nn.Module):
    """self-attention -> cross-attention -> z + FF(AdLN(z))."""

    def __init__(self, width: int, heads: int, fft_enabled: bool, rope_enabled: bool, **adln_kwargs):
        super().__init__()
        self.self_attn = SpectralSelfAttention(width, heads, fft_enabled, rope_enabled, **adln_kwargs)
        self.cross_attn = SpectralCrossAttention(width, heads, fft_enabled, **adln_kwargs)
        self.ff_norm = AdLN(width, **adln_kwargs)
        self.ff = FeedForward(width)

    def forward(
        self,
        z: Tensor,
        text: Tensor,
        cond: CondSignal,
        positions: Optional[Tensor] = None,
        text_mask: Optional[Tensor] = None,
    ) -> Tensor:
        z = self.self_attn(z, cond, positions)
        z = self.cross_attn(z, text, cond, text_mask)
        return z + self.ff(self.ff_norm(z, cond))


@dataclass
class DenoiserConfig:
    """Spectral denoiser hyperparameters; width/heads/blocks default to the 'desk' preset."""

    codebook_size: int = 256
    width: int = 64
    heads: int = 4
    blocks: int = 2
    text_dim: int = 32
    max_text_len: int = 8
    max_steps: int = DEFAULT_DIFFUSION_STEPS
    fps_vocab: int = FPS_VOCAB_SIZE
    t_embed_dim: int = 32
    fps_embed_dim: int = 16
    rope_enabled: bool = True
    fft_enabled: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.codebook_size < 2:
            raise ValidationError(f"codebook_size={self.codebook_size} must be >= 2")
        if self.width < 1 or self.heads < 1 or self.blocks < 1:
            raise ValidationError("width, heads and blocks must be >= 1")
        if self.width % self.heads:
            raise ValidationError(f"width={self.width} must be divisible by heads={self.heads}")
        if self.rope_enabled and (self.width // self.heads) % 2:
            raise ValidationError(f"head dim {self.width // self.heads} must be even when RoPE is enabled")
        if self.max_text_len < 1 or self.text_dim < 1:
            raise ValidationError("max_text_len and text_dim must be >= 1")
        if self.max_steps < 1:
            raise ValidationError(f"max_steps={self.max_steps} must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @property
    def mask_id(self) -> int:
        return self.codebook_size

    def adln_kwargs(self) -> Dict:
        return {
            "max_steps": self.max_steps,
            "fps_vocab": self.fps_vocab,
            "t_dim": self.t_embed_dim,
            "fps_dim": self.fps_embed_dim,
        }

    @classmethod
    def from_preset(cls, preset: str, **overrides) -> "DenoiserConfig":
        if preset not in DENOISER_PRESETS:
            raise ValidationError(f"Unknown preset '{preset}', expected one of {sorted(DENOISER_PRESETS)}")
        width, heads, blocks = DENOISER_PRESETS[preset]
        return cls(**{"width": width, "heads": heads, "blocks": blocks, **overrides})

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "DenoiserConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValidationError(f"Unknown DenoiserConfig keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class TextEmbeddingSeq:
    embeddings: Tensor  # (L, E_text)
    provider: str = "toy"

    def __post_init__(self):
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] < 1:
            raise ValidationError(f"text embeddings must be (L >= 1, E_text), got {tuple(self.embeddings.shape)}")
        if self.provider not in ("toy", "external"):
            raise ValidationError(f"provider '{self.provider}' must be 'toy' or 'external'")


class ToyTextEncoder(nn.Module):
    """Whitespace tokenizer over the caption grammar plus a learned embedding table."""

    def __init__(self, dim: int, grammar: Sequence[str] = CAPTION_GRAMMAR):
        super().__init__()
        self.vocab: List[str] = [PAD_TOKEN, UNK_TOKEN] + list(grammar)
        self.index = {token: i for i, token in enumerate(self.vocab)}
        self.embedding = nn.Embedding(len(self.vocab), dim, padding_idx=0)

    @property
    def unk_id(self) -> int:
        return self.index[UNK_TOKEN]

    def vocab_hash(self) -> str:
        return hashlib.sha256("\n".join(self.vocab).encode("utf-8")).hexdigest()

    def tokenize(self, caption: str) -> List[int]:
        words = caption.lower().split()
        if not words:
            raise ValidationError("caption must be nonempty")
        return [self.index.get(w, self.unk_id) for w in words]

    def encode(self, caption: str) -> TextEmbeddingSeq:
        ids = torch.tensor(self.tokenize(caption), dtype=torch.long, device=self.embedding.weight.device)
        return TextEmbeddingSeq(self.embedding(ids), provider="toy")

    def encode_batch(self, captions: Sequence[str]) -> Tuple[Tensor, Tensor]:
        """Captions -> ((B, L, E_text) embeddings, (B, L) bool validity mask), padded to the longest."""
        token_lists = [self.tokenize(c) for c in captions]
        length = max(len(ids) for ids in token_lists)
        ids = torch.zeros(len(token_lists), length, dtype=torch.long)
        for row, tokens in enumerate(token_lists):
            ids[row, : len(tokens)] = torch.tensor(tokens)
        ids = ids.to(self.embedding.weight.device)
        return self.embedding(ids), ids != 0


def toy_text_encoder(caption: str, encoder: ToyTextEncoder) -> TextEmbeddingSeq:
    return encoder.encode(caption)


def load_text_embeddings(path: Union[str, Path]) -> TextEmbeddingSeq:
    """Externally produced (L, E_text) float32 MAURA1 array."""
    arr = read_array(path)
    if arr.ndim != 2 or arr.dtype.kind != "f":
        raise ValidationError(f"{path}: text embeddings must be a 2D float32 array, got {arr.dtype} {arr.shape}")
    logger.info(f"Loaded external text embeddings {arr.shape} from {path}")
    return TextEmbeddingSeq(torch.from_numpy(arr.copy()), provider="external")


@dataclass
class DenoiserCondition:
    """
    Conditioning for one denoiser call.

    text is None for the unconditional branch. drop marks batch items whose
    text is replaced by the learned null embedding (condition dropout).
    """

    fps: Tensor  # (B,)
    text: Optional[Tensor] = None  # (B, L, E_text)
    text_mask: Optional[Tensor] = None  # (B, L) bool
    drop: Optional[Tensor] = None  # (B,) bool

    def unconditional(self) -> "DenoiserCondition":
        return DenoiserCondition(fps=self.fps)


class SpectralDenoiser(nn.Module):
    """Token grid (B, S) with MASK_ID allowed -> (B, S, K) logits."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        self.token_embed = nn.Embedding(cfg.codebook_size + 1, cfg.width)
        self.text_encoder = ToyTextEncoder(cfg.text_dim)
        self.text_proj = nn.Linear(cfg.text_dim, cfg.width)
        self.null_text = nn.Parameter(torch.randn(1, cfg.text_dim) * 0.02)
        self.blocks = nn.ModuleList(
            SpectralBlock(cfg.width, cfg.heads, cfg.fft_enabled, cfg.rope_enabled, **cfg.adln_kwargs())
            for _ in range(cfg.blocks)
        )
        self.output_head = nn.Sequential(
            nn.LayerNorm(cfg.width),
            nn.Linear(cfg.width, cfg.width),
            nn.GELU(),
            nn.Linear(cfg.width, cfg.codebook_size),
        )
        logger.debug(
            f"SpectralDenoiser E={cfg.width} heads={cfg.heads} blocks={cfg.blocks} "
            f"params={sum(p.numel() for p in self.parameters()):,}"
        )

    @property
    def mask_id(self) -> int:
        return self.cfg.codebook_size

    def embed(self, z: Tensor) -> Tensor:
        if z.dtype.is_floating_point:
            raise ValidationError(f"token grid must be integer, got {z.dtype}")
        if z.numel() and (int(z.min()) < 0 or int(z.max()) > self.mask_id):
            raise ValidationError(f"token indices outside [0, {self.mask_id}]")
        return self.token_embed(z.long())

    def encode_captions(self, captions: Sequence[str]) -> Tuple[Tensor, Tensor]:
        return self.text_encoder.encode_batch(captions)

    def condition(self, captions: Sequence[str], fps: Union[int, Sequence[int]] = DEFAULT_FPS) -> DenoiserCondition:
        text, mask = self.encode_captions(captions)
        fps_t = torch.as_tensor([fps] * len(captions) if isinstance(fps, int) else list(fps), dtype=torch.long)
        return DenoiserCondition(fps=fps_t, text=text, text_mask=mask)

    def text_states(self, cond: Optional[DenoiserCondition], batch: int, dtype: torch.dtype) -> Tuple[Tensor, Tensor]:
        """
        Project text to width E, padded to max_text_len; null text where absent or dropped.

        Padded rows are zeroed here, in the sequence domain, before cross-attention
        applies its Fourier transform. The returned mask only gates keys when the
        transform is disabled.
        """
        L, Dt = self.cfg.max_text_len, self.cfg.text_dim
        device = self.null_text.device
        null_rows = torch.cat(
            [self.null_text.to(dtype).expand(batch, 1, Dt), torch.zeros(batch, L - 1, Dt, dtype=dtype, device=device)],
            dim=1,
        )
        null_mask = torch.zeros(batch, L, dtype=torch.bool, device=device)
        null_mask[:, 0] = True

        if cond is None or cond.text is None:
            text, mask = null_rows, null_mask
        else:
            text = cond.text.to(dtype)
            if text.ndim != 3 or text.shape[0] != batch or text.shape[2] != Dt:
                raise ValidationError(f"text must be ({batch}, L, {Dt}), got {tuple(text.shape)}")
            if text.shape[1] > L:
                raise ValidationError(f"text length {text.shape[1]} exceeds max_text_len={L}")
            mask = cond.text_mask if cond.text_mask is not None else torch.ones(text.shape[:2], dtype=torch.bool)
            pad = L - text.shape[1]
            text = F.pad(text, (0, 0, 0, pad))
            mask = F.pad(mask.bool().to(device), (0, pad), value=False)
            if cond.drop is not None:
                drop = cond.drop.bool().to(device)
                text = torch.where(drop[:, None, None], null_rows, text)
                mask = torch.where(drop[:, None], null_mask, mask)
        return self.text_proj(text) * mask[..., None].to(dtype), mask

    def forward_embeddings(self, h: Tensor, t: Tensor, cond: Optional[DenoiserCondition] = None) -> Tensor:
        """Run the block stack on an already-embedded sequence (B, S, E)."""
        batch, seq, _ = h.shape
        fps = cond.fps if cond is not None else torch.full((batch,), DEFAULT_FPS, dtype=torch.long)
        signal = CondSignal(t=t.to(h.device), fps=fps.to(h.device))
        text, text_mask = self.text_states(cond, batch, h.dtype)
        positions = torch.arange(seq)
        if not self.cfg.rope_enabled:
            h = h + sinusoidal_embedding(positions, self.cfg.width, dtype=h.dtype).to(h.device)
        for block in self.blocks:
            h = block(h, text, signal, positions, text_mask)
        return h

    def head(self, h: Tensor) -> Tensor:
        return self.output_head(h)

    def forward(self, z: Tensor, t: Tensor, cond: Optional[DenoiserCondition] = None) -> Tensor:
        return self.head(self.forward_embeddings(self.embed(z), t, cond))


def denoiser_forward(
    z_t: Tensor, cond: CondSignal, text: Optional[DenoiserCondition], model: SpectralDenoiser
) -> Tensor:
    """Functional entry: fps from `cond` overrides the one carried by `text`."""
    condition = DenoiserCondition(
        fps=cond.fps,
        text=text.text if text is not None else None,
        text_mask=text.text_mask if text is not None else None,
    )
    return model(z_t, cond.t, condition)
