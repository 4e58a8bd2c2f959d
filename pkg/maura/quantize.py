"""
Discretization of continuous latents.

Two quantizers share one result type:
    - VectorQuantizer: learned K x d codebook, nearest neighbour in squared
      Euclidean distance, ties to the lowest index.
    - LookupFreeQuantizer: each of the d channels snaps to +1 / -1 on its sign
      (zero counts as positive); the index is read off the sign bits, K = 2**d.

Both feed the decoder through a straight-through estimator whose forward value
is bit-identical to the quantized vectors. The index K is reserved as MASK_ID
for the diffusion stage and is never decodable.
"""

from dataclasses import dataclass
from typing import Union

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange
from torch import Tensor

from maura.exceptions import ValidationError


@dataclass
class QuantizeResult:
    """
    Output of a quantizer.

    z_q holds the selected vectors exactly (lookup(tokens) == z_q); z_st has
    the same forward value but routes gradients to the encoder output.
    """

    z_q: Tensor
    z_st: Tensor
    tokens: Tensor
    codebook_loss: Tensor
    commit_loss: Tensor


@dataclass(frozen=True)
class CodebookUsage:
    fraction_used: float
    perplexity: float


class _StraightThrough(torch.autograd.Function):
    @staticmethod
    def forward(ctx, z_c: Tensor, z_q: Tensor) -> Tensor:
        return z_q.clone()

    @staticmethod
    def backward(ctx, grad_output: Tensor):
        return grad_output, None


def straight_through(z_c: Tensor, z_q: Tensor) -> Tensor:
    """Forward value z_q; backward copies the incoming gradient to z_c."""
    if z_c.shape != z_q.shape:
        raise ValidationError(f"straight_through shape mismatch: {tuple(z_c.shape)} vs {tuple(z_q.shape)}")
    return _StraightThrough.apply(z_c, z_q)


def _check_tokens(tokens: Tensor, codebook_size: int) -> None:
    if tokens.dtype.is_floating_point or tokens.dtype == torch.bool:
        raise ValidationError(f"tokens must be an integer tensor, got {tokens.dtype}")
    if tokens.numel() == 0:
        return
    if bool((tokens == codebook_size).any()):
        raise ValidationError(f"token grid contains MASK_ID={codebook_size}; masked grids are not decodable")
    lo, hi = int(tokens.min()), int(tokens.max())
    if lo < 0 or hi >= codebook_size:
        raise ValidationError(f"token index range [{lo}, {hi}] outside [0, {codebook_size - 1}]")


def vq_quantize(z_c: Tensor, codebook: Tensor) -> QuantizeResult:
    """
    Nearest-neighbour vector quantization over the last axis.

    Args:
        z_c: (..., d) continuous latents
        codebook: (K, d) codebook vectors

    Returns:
        QuantizeResult in the same (..., d) layout, tokens shaped (...)
    """
    if codebook.ndim != 2 or codebook.shape[0] == 0:
        raise ValidationError("vq_quantize needs a nonempty (K, d) codebook")
    d = codebook.shape[1]
    if z_c.shape[-1] != d:
        raise ValidationError(f"latent dim {z_c.shape[-1]} does not match codebook dim {d}")

    flat = z_c.reshape(-1, d)
    with torch.no_grad():
        distances = ((flat[:, None, :] - codebook[None, :, :]) ** 2).sum(dim=-1)
        indices = distances.argmin(dim=1)  # first minimum wins ties

    z_q = F.embedding(indices, codebook).reshape(z_c.shape)
    return QuantizeResult(
        z_q=z_q,
        z_st=straight_through(z_c, z_q),
        tokens=indices.reshape(z_c.shape[:-1]),
        codebook_loss=F.mse_loss(z_q, z_c.detach()),
        commit_loss=F.mse_loss(z_c, z_q.detach()),
    )


def lfq_quantize(z_c: Tensor, d: int) -> QuantizeResult:
    """
    Lookup-free quantization over the last axis.

    Bit j is 1 when z_j >= 0; the quantized value is +1 / -1 and the index is
    sum_j bit_j * 2**j.
    """
    if z_c.shape[-1] != d:
        raise ValidationError(f"latent dim {z_c.shape[-1]} does not match LFQ dim {d}")
    bits = z_c >= 0
    q = bits.to(z_c.dtype) * 2 - 1
    weights = 2 ** torch.arange(d, device=z_c.device, dtype=torch.long)
    indices = (bits.long() * weights).sum(dim=-1)

    q = q.detach()
    return QuantizeResult(
        z_q=q,
        z_st=straight_through(z_c, q),
        tokens=indices,
        codebook_loss=F.mse_loss(q, z_c.detach()),
        commit_loss=F.mse_loss(z_c, q),
    )


def vq_lookup(tokens: Tensor, codebook: Tensor) -> Tensor:
    """(...) tokens -> (..., d) codebook vectors."""
    _check_tokens(tokens, codebook.shape[0])
    return F.embedding(tokens.long(), codebook)


def lfq_lookup(tokens: Tensor, d: int, dtype: torch.dtype = torch.float32) -> Tensor:
    """(...) tokens -> (..., d) sign vectors."""
    _check_tokens(tokens, 2**d)
    shifts = torch.arange(d, device=tokens.device, dtype=torch.long)
    bits = (tokens.long()[..., None] >> shifts) & 1
    return bits.to(dtype) * 2 - 1


class VectorQuantizer(nn.Module):
    """Learned codebook quantizer over channel-first latents (B, d, n, h, w)."""

    def __init__(self, codebook_size: int, dim: int):
        super().__init__()
        if codebook_size < 2:
            raise ValidationError(f"codebook_size={codebook_size} must be >= 2")
        self.codebook_size = codebook_size
        self.dim = dim
        self.embedding = nn.Embedding(codebook_size, dim)
        nn.init.uniform_(self.embedding.weight, -1.0 / codebook_size, 1.0 / codebook_size)

    @property
    def mask_id(self) -> int:
        return self.codebook_size

    @property
    def codebook(self) -> Tensor:
        return self.embedding.weight

    def forward(self, z_c: Tensor) -> QuantizeResult:
        result = vq_quantize(rearrange(z_c, "b d n h w -> b n h w d"), self.embedding.weight)
        result.z_q = rearrange(result.z_q, "b n h w d -> b d n h w")
        result.z_st = rearrange(result.z_st, "b n h w d -> b d n h w")
        return result

    def lookup(self, tokens: Tensor) -> Tensor:
        return rearrange(vq_lookup(tokens, self.embedding.weight), "b n h w d -> b d n h w")


class LookupFreeQuantizer(nn.Module):
    """Sign quantizer over channel-first latents; has no parameters."""

    def __init__(self, dim: int):
        super().__init__()
        if dim < 1:
            raise ValidationError(f"LFQ dim={dim} must be >= 1")
        self.dim = dim
        self.codebook_size = 2**dim

    @property
    def mask_id(self) -> int:
        return self.codebook_size

    @property
    def codebook(self) -> Tensor:
        """The implicit (2**d, d) codebook of sign patterns."""
        return lfq_lookup(torch.arange(self.codebook_size), self.dim)

    def forward(self, z_c: Tensor) -> QuantizeResult:
        result = lfq_quantize(rearrange(z_c, "b d n h w -> b n h w d"), self.dim)
        result.z_q = rearrange(result.z_q, "b n h w d -> b d n h w")
        result.z_st = rearrange(result.z_st, "b n h w d -> b d n h w")
        return result

    def lookup(self, tokens: Tensor, dtype: torch.dtype = torch.float32) -> Tensor:
        return rearrange(lfq_lookup(tokens, self.dim, dtype), "b n h w d -> b d n h w")


Quantizer = Union[VectorQuantizer, LookupFreeQuantizer]


def build_quantizer(kind: str, codebook_size: int, dim: int) -> Quantizer:
    """Factory for the configured quantizer ('vq' or 'lfq')."""
    if kind == "vq":
        return VectorQuantizer(codebook_size, dim)
    if kind == "lfq":
        if codebook_size != 2**dim:
            raise ValidationError(f"LFQ with d={dim} has K={2**dim} codes, config says {codebook_size}")
        return LookupFreeQuantizer(dim)
    raise ValidationError(f"Unknown quantizer '{kind}', expected 'vq' or 'lfq'")


def lookup(tokens: Tensor, quantizer: Quantizer) -> Tensor:
    """Token grid (B, n, h, w) -> latent grid (B, d, n, h, w)."""
    return quantizer.lookup(tokens)


def codebook_usage(tokens: Tensor, codebook_size: int) -> CodebookUsage:
    """
    Fraction of codes used and perplexity of the empirical index distribution.

    Args:
        tokens: Any-shaped integer tensor of indices
        codebook_size: K
    """
    flat = tokens.reshape(-1).long()
    if flat.numel() == 0:
        raise ValidationError("codebook_usage needs a nonempty token stream")
    _check_tokens(flat, codebook_size)

    counts = torch.bincount(flat, minlength=codebook_size).double()
    probs = counts / counts.sum()
    nonzero = probs[probs > 0]
    entropy = -(nonzero * nonzero.log()).sum()
    return CodebookUsage(
        fraction_used=float((counts > 0).sum()) / codebook_size,
        perplexity=float(torch.exp(entropy)),
    )
