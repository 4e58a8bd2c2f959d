"""
3D mobile-bottleneck VQ autoencoder with a masked-frame-index head.

Layout is channel-first throughout: clips are (B, 3, N, H, W) and latents are
(B, d, N / f_t, H / 16, W / 16). The encoder is built from an explicit block
plan (stem conv, MBConv and Inception-Fused blocks per resolution stage,
strided downsampling convs) and the decoder runs the mirrored plan with
transposed convolutions.
"""

from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Optional, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F
from loguru import logger
from torch import Tensor

from maura.constants import DEFAULT_BETA, SPATIAL_DOWNSAMPLE
from maura.exceptions import ValidationError
from maura.quantize import QuantizeResult, build_quantizer


@dataclass
class Vae3dConfig:
    """Autoencoder hyperparameters."""

    in_channels: int = 3
    base_channels: int = 32
    latent_channels: int = 8
    temporal_downsample: int = 4
    n_frames: int = 8
    quantizer: str = "lfq"
    codebook_size: int = 256
    beta: float = DEFAULT_BETA
    mbconv_per_stage: int = 2
    inception_per_stage: int = 1
    channel_multipliers: Tuple[int, ...] = (1, 1, 2, 2)
    mfi_hidden: int = 64
    spatial_downsample: int = SPATIAL_DOWNSAMPLE

    def __post_init__(self):
        self.channel_multipliers = tuple(self.channel_multipliers)
        self.validate()

    def validate(self) -> None:
        if self.spatial_downsample != SPATIAL_DOWNSAMPLE:
            raise ValidationError(f"spatial_downsample is fixed at {SPATIAL_DOWNSAMPLE}")
        if self.temporal_downsample not in (1, 4):
            raise ValidationError(f"temporal_downsample={self.temporal_downsample} must be 1 or 4")
        if self.n_frames < 1 or self.n_frames % self.temporal_downsample:
            raise ValidationError(
                f"n_frames={self.n_frames} must be divisible by temporal_downsample={self.temporal_downsample}"
            )
        if len(self.channel_multipliers) != 4:
            raise ValidationError("channel_multipliers needs one entry per resolution stage (4)")
        if self.base_channels < 1 or self.latent_channels < 1:
            raise ValidationError("base_channels and latent_channels must be >= 1")
        if self.quantizer == "lfq" and self.codebook_size != 2**self.latent_channels:
            raise ValidationError(
                f"LFQ with d={self.latent_channels} has K={2 ** self.latent_channels}, got codebook_size={self.codebook_size}"
            )
        if self.quantizer not in ("vq", "lfq"):
            raise ValidationError(f"quantizer='{self.quantizer}' must be 'vq' or 'lfq'")
        if self.beta < 0:
            raise ValidationError(f"beta={self.beta} must be >= 0")

    @property
    def stage_channels(self) -> List[int]:
        return [self.base_channels * m for m in self.channel_multipliers]

    def latent_shape(self, n_frames: int, height: int, width: int) -> Tuple[int, int, int, int]:
        return (
            self.latent_channels,
            n_frames // self.temporal_downsample,
            height // self.spatial_downsample,
            width // self.spatial_downsample,
        )

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["channel_multipliers"] = list(self.channel_multipliers)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "Vae3dConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"Unknown Vae3dConfig keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class BlockSpec:
    """One entry of the encoder/decoder block plan."""

    kind: str  # conv3d | mbconv | inception_fused | downsample | upsample
    c_in: int
    c_out: int
    stride: Tuple[int, int, int] = (1, 1, 1)
    kernel: Tuple[int, int, int] = (3, 3, 3)


def _temporal_strides(cfg: Vae3dConfig) -> List[int]:
    # f_t = 4 is two x2 temporal strides on the last two downsampling convs
    return [1, 2, 2] if cfg.temporal_downsample == 4 else [1, 1, 1]


def encoder_plan(cfg: Vae3dConfig) -> List[BlockSpec]:
    """Stem (/2 spatial), four stages with three strided downsamples (/8), projection to d."""
    ch = cfg.stage_channels
    ts = _temporal_strides(cfg)
    plan = [BlockSpec("conv3d", cfg.in_channels, ch[0], stride=(1, 2, 2), kernel=(1, 3, 3))]
    for s, c in enumerate(ch):
        plan += [BlockSpec("mbconv", c, c) for _ in range(cfg.mbconv_per_stage)]
        plan += [BlockSpec("inception_fused", c, c) for _ in range(cfg.inception_per_stage)]
        if s < len(ch) - 1:
            plan.append(BlockSpec("downsample", c, ch[s + 1], stride=(ts[s], 2, 2)))
    plan.append(BlockSpec("conv3d", ch[-1], cfg.latent_channels, kernel=(1, 1, 1)))
    return plan


def decoder_plan(cfg: Vae3dConfig) -> List[BlockSpec]:
    """Mirror image of encoder_plan with transposed-conv upsampling."""
    ch = cfg.stage_channels
    ts = _temporal_strides(cfg)
    plan = [BlockSpec("conv3d", cfg.latent_channels, ch[-1])]
    for s in reversed(range(len(ch))):
        c = ch[s]
        plan += [BlockSpec("mbconv", c, c) for _ in range(cfg.mbconv_per_stage)]
        plan += [BlockSpec("inception_fused", c, c) for _ in range(cfg.inception_per_stage)]
        if s > 0:
            plan.append(BlockSpec("upsample", c, ch[s - 1], stride=(ts[s - 1], 2, 2)))
    plan.append(BlockSpec("upsample", ch[0], ch[0], stride=(1, 2, 2)))
    plan.append(BlockSpec("conv3d", ch[0], cfg.in_channels))
    return plan


class SqueezeExcite3d(nn.Module):
    """y = x * sigmoid(W2 act(W1 gap(x))), gate broadcast over (N, H, W)."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        self.channels = channels
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)
        self.act = nn.SiLU()

    def forward(self, x: Tensor) -> Tensor:
        squeezed = x.mean(dim=(2, 3, 4))
        gate = torch.sigmoid(self.fc2(self.act(self.fc1(squeezed))))
        return x * gate[:, :, None, None, None]


class MBConv3d(nn.Module):
    """
    3D mobile inverted bottleneck.

    conv 3x3x3 (C_in -> C) -> pointwise expand (C -> 4C) -> SE at 4C ->
    depthwise 3x3x3 at 4C -> pointwise project (4C -> C), residual when C_in == C.
    """

    def __init__(self, c_in: int, c: int, expansion: int = 4):
        super().__init__()
        wide = expansion * c
        self.conv = nn.Conv3d(c_in, c, 3, padding=1)
        self.expand = nn.Conv3d(c, wide, 1)
        self.se = SqueezeExcite3d(wide)
        self.depthwise = nn.Conv3d(wide, wide, 3, padding=1, groups=wide)
        self.project = nn.Conv3d(wide, c, 1)
        self.act = nn.SiLU()
        self.residual = c_in == c

    @property
    def channel_trace(self) -> List[int]:
        return [
            self.conv.out_channels,
            self.expand.out_channels,
            self.se.channels,
            self.depthwise.out_channels,
            self.project.out_channels,
        ]

    def forward(self, x: Tensor) -> Tensor:
        h = self.act(self.conv(x))
        h = self.act(self.expand(h))
        h = self.se(h)
        h = self.act(self.depthwise(h))
        h = self.project(h)
        return h + x if self.residual else h


class InceptionFused3d(nn.Module):
    """Three factorized-kernel branches, each with a depthwise sub-block, fused 3C -> C."""

    KERNELS = ((3, 3, 1), (3, 1, 3), (1, 3, 3))

    def __init__(self, c: int):
        super().__init__()
        self.branch_channels = c
        self.branches = nn.ModuleList(
            nn.Sequential(
                nn.Conv3d(c, c, k, padding=tuple(s // 2 for s in k)),
                nn.SiLU(),
                nn.Conv3d(c, c, 3, padding=1, groups=c),
                nn.SiLU(),
            )
            for k in self.KERNELS
        )
        self.fuse = nn.Conv3d(3 * c, c, 1)

    @property
    def concat_channels(self) -> int:
        return len(self.branches) * self.branch_channels

    def forward(self, x: Tensor) -> Tensor:
        return self.fuse(torch.cat([branch(x) for branch in self.branches], dim=1))


def _build_block(spec: BlockSpec) -> nn.Module:
    if spec.kind == "conv3d":
        padding = tuple(k // 2 for k in spec.kernel)
        return nn.Conv3d(spec.c_in, spec.c_out, spec.kernel, stride=spec.stride, padding=padding)
    if spec.kind == "mbconv":
        return MBConv3d(spec.c_in, spec.c_out)
    if spec.kind == "inception_fused":
        return InceptionFused3d(spec.c_out)
    if spec.kind == "downsample":
        return nn.Sequential(nn.Conv3d(spec.c_in, spec.c_out, 3, stride=spec.stride, padding=1), nn.SiLU())
    if spec.kind == "upsample":
        return nn.Sequential(nn.ConvTranspose3d(spec.c_in, spec.c_out, spec.stride, stride=spec.stride), nn.SiLU())
    raise ValidationError(f"Unknown block kind '{spec.kind}'")


class Encoder3d(nn.Module):
    def __init__(self, cfg: Vae3dConfig):
        super().__init__()
        self.plan = encoder_plan(cfg)
        self.blocks = nn.ModuleList(_build_block(spec) for spec in self.plan)

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


class Decoder3d(nn.Module):
    def __init__(self, cfg: Vae3dConfig):
        super().__init__()
        self.plan = decoder_plan(cfg)
        self.blocks = nn.ModuleList(_build_block(spec) for spec in self.plan)

    def forward(self, z: Tensor) -> Tensor:
        for block in self.blocks:
            z = block(z)
        return z.clamp(0.0, 1.0)


class MFIHead(nn.Module):
    """Predicts which of the N input frames was fully masked, from pre-quantization latents."""

    def __init__(self, latent_channels: int, latent_frames: int, n_frames: int, hidden: int = 64):
        super().__init__()
        self.n_frames = n_frames
        self.fc1 = nn.Linear(latent_channels * latent_frames, hidden)
        self.fc2 = nn.Linear(hidden, n_frames)

    def forward(self, z_c: Tensor) -> Tensor:
        """(B, d, n', h', w') -> (B, N) logits."""
        pooled = z_c.mean(dim=(3, 4)).flatten(1)
        return self.fc2(F.gelu(self.fc1(pooled)))


def mfi_head(head: MFIHead, z_c: Tensor) -> Tensor:
    """FrameIndexDistribution: softmax over the N frame logits."""
    return torch.softmax(head(z_c), dim=-1)


@dataclass
class VaeForward:
    x_hat: Tensor
    z_c: Tensor
    quant: QuantizeResult
    mfi_logits: Tensor


class Vae3d(nn.Module):
    """Encoder, quantizer, decoder and masked-frame-index head."""

    def __init__(self, cfg: Vae3dConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder3d(cfg)
        self.quantizer = build_quantizer(cfg.quantizer, cfg.codebook_size, cfg.latent_channels)
        self.decoder = Decoder3d(cfg)
        self.mfi = MFIHead(
            cfg.latent_channels, cfg.n_frames // cfg.temporal_downsample, cfg.n_frames, cfg.mfi_hidden
        )
        logger.debug(f"Vae3d built with {sum(p.numel() for p in self.parameters()):,} parameters")

    @property
    def codebook_size(self) -> int:
        return self.quantizer.codebook_size

    def _check_clip(self, x: Tensor) -> None:
        if x.ndim != 5 or x.shape[1] != self.cfg.in_channels:
            raise ValidationError(f"expected clips shaped (B, {self.cfg.in_channels}, N, H, W), got {tuple(x.shape)}")
        n, h, w = x.shape[2:]
        f_t, s = self.cfg.temporal_downsample, self.cfg.spatial_downsample
        if n % f_t:
            raise ValidationError(f"N={n} must be divisible by temporal_downsample={f_t}")
        if h % s or w % s:
            raise ValidationError(f"H={h}, W={w} must be divisible by {s}")

    def encode(self, x: Tensor) -> Tensor:
        """(B, 3, N, H, W) -> z_c (B, d, N/f_t, H/16, W/16)."""
        self._check_clip(x)
        return self.encoder(x)

    def quantize(self, z_c: Tensor) -> QuantizeResult:
        return self.quantizer(z_c)

    def decode(self, z_q: Tensor) -> Tensor:
        """(B, d, n', h', w') -> (B, 3, n' f_t, 16 h', 16 w') in [0, 1]."""
        if z_q.ndim != 5 or z_q.shape[1] != self.cfg.latent_channels:
            raise ValidationError(
                f"expected latents shaped (B, {self.cfg.latent_channels}, n, h, w), got {tuple(z_q.shape)}"
            )
        return self.decoder(z_q)

    def frame_index_distribution(self, z_c: Tensor) -> Tensor:
        if z_c.shape[2] * self.cfg.temporal_downsample != self.cfg.n_frames:
            raise ValidationError(f"MFI head is sized for N={self.cfg.n_frames} frames")
        return mfi_head(self.mfi, z_c)

    def forward(self, x: Tensor) -> VaeForward:
        z_c = self.encode(x)
        quant = self.quantize(z_c)
        x_hat = self.decode(quant.z_st)
        mfi_logits = self.mfi(z_c) if x.shape[2] == self.cfg.n_frames else None
        return VaeForward(x_hat=x_hat, z_c=z_c, quant=quant, mfi_logits=mfi_logits)

    @torch.no_grad()
    def tokenize(self, x: Tensor) -> Tensor:
        """Clips -> token grids (B, n', h', w')."""
        return self.quantize(self.encode(x)).tokens

    @torch.no_grad()
    def detokenize(self, tokens: Tensor) -> Tensor:
        """Token grids -> clips; rejects MASK_ID."""
        latent = self.quantizer.lookup(tokens).to(next(self.decoder.parameters()).dtype)
        return self.decode(latent)


@dataclass
class VaeLossReport:
    rec: Tensor
    codebook: Tensor
    commit: Tensor
    mfi: Tensor
    total: Tensor

    def as_floats(self) -> Dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("rec", "codebook", "commit", "mfi", "total")}


def vae_loss(
    V: Tensor,
    V_hat: Tensor,
    z_c: Tensor,
    z_q_vectors: Tensor,
    beta: float,
    mfi_prob_true: Union[float, Tensor] = 1.0,
    mfi_log_prob_true: Optional[Tensor] = None,
) -> VaeLossReport:
    """
    Combined autoencoder objective.

    total = rec + codebook + beta * commit + mfi, with
        rec      = MSE(V, V_hat)
        codebook = MSE(sg[z_c], z_q)   (updates the codebook only)
        commit   = MSE(z_c, sg[z_q])   (updates the encoder only)
        mfi      = -log p(true masked frame), averaged over the batch

    Args:
        mfi_prob_true: probability in (0, 1] of the true masked frame per sample (1.0 for
            samples without a masked frame)
        mfi_log_prob_true: log-probabilities; used instead of mfi_prob_true when given
    """
    if V.shape != V_hat.shape:
        raise ValidationError(f"V {tuple(V.shape)} and V_hat {tuple(V_hat.shape)} differ in shape")
    if z_c.shape != z_q_vectors.shape:
        raise ValidationError(f"z_c {tuple(z_c.shape)} and z_q {tuple(z_q_vectors.shape)} differ in shape")

    rec = F.mse_loss(V_hat, V)
    codebook = F.mse_loss(z_q_vectors, z_c.detach())
    commit = F.mse_loss(z_c, z_q_vectors.detach())

    if mfi_log_prob_true is not None:
        mfi = -mfi_log_prob_true.mean()
    else:
        p = torch.as_tensor(mfi_prob_true, dtype=rec.dtype, device=rec.device)
        if bool(((p <= 0) | (p > 1)).any()):
            raise ValidationError(f"mfi_prob_true must lie in (0, 1], got {p.detach().flatten().tolist()}")
        mfi = -torch.log(p).mean()

    total = rec + codebook + beta * commit + mfi
    return VaeLossReport(rec=rec, codebook=codebook, commit=commit, mfi=mfi, total=total)
