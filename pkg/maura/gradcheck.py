#!/usr/bin/env python3
"""
Finite-difference gradient checks for the differentiable building blocks.

Every registered target builds a small double-precision instance of one op
together with its inputs. Analytic gradients of <f(x), w> for a fixed random
projection w are compared against central differences with step h = 1e-5.
The reported error is max|g_analytic - g_numeric| / max|g_analytic| over all
input elements.
"""

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from loguru import logger
from torch import Tensor

from maura.adapt_inpaint import lora_forward
from maura.exceptions import ValidationError
from maura.maskdiff import diffusion_loss
from maura.quantize import straight_through
from maura.spectral import (
    AdLN,
    CondSignal,
    DenoiserCondition,
    DenoiserConfig,
    SpectralCrossAttention,
    SpectralDenoiser,
    SpectralSelfAttention,
    fft2d_real,
    ifft2d_real,
    rope_apply,
)
from maura.vae3d import InceptionFused3d, MBConv3d, MFIHead, SqueezeExcite3d, mfi_head, vae_loss

DEFAULT_STEP = 1e-5
LINEAR_TOLERANCE = 1e-6
NONLINEAR_TOLERANCE = 1e-4

Builder = Callable[[torch.Generator], Tuple[Callable[..., Tensor], List[Tensor]]]


@dataclass(frozen=True)
class GradTarget:
    name: str
    build: Builder
    tolerance: float


@dataclass
class GradcheckReport:
    target: str
    max_rel_error: float
    tolerance: float
    n_elements: int
    elapsed: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


REGISTRY: Dict[str, GradTarget] = {}


def register(name: str, tolerance: float = NONLINEAR_TOLERANCE):
    def wrap(build: Builder) -> Builder:
        REGISTRY[name] = GradTarget(name=name, build=build, tolerance=tolerance)
        return build

    return wrap


def list_targets() -> List[str]:
    return sorted(REGISTRY)


def _randn(gen: torch.Generator, *shape) -> Tensor:
    return torch.randn(tuple(shape), generator=gen, dtype=torch.float64)


def _perturb_parameters(module: nn.Module, gen: torch.Generator, scale: float = 0.3) -> nn.Module:
    """Nonzero weights everywhere, so zero-initialized layers take part in the check."""
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(_randn(gen, *p.shape) * scale)
    return module


def _adln_kwargs() -> Dict:
    return {"max_steps": 10, "t_dim": 8, "fps_dim": 4}


def _cond() -> CondSignal:
    return CondSignal(t=torch.tensor([3]), fps=torch.tensor([8]))


@register("se3d")
def _se3d(gen):
    module = SqueezeExcite3d(4).double()
    return module, [_randn(gen, 1, 4, 2, 3, 3)]


@register("mbconv3d")
def _mbconv3d(gen):
    module = MBConv3d(4, 4).double()
    return module, [_randn(gen, 1, 4, 2, 4, 4)]


@register("inception_fused")
def _inception_fused(gen):
    module = InceptionFused3d(4).double()
    return module, [_randn(gen, 1, 4, 2, 4, 4)]


@register("adln")
def _adln(gen):
    module = _perturb_parameters(AdLN(8, max_steps=10, t_dim=8, fps_dim=4).double(), gen)
    cond = _cond()
    return (lambda x: module(x, cond)), [_randn(gen, 1, 4, 8)]


@register("rope_apply", LINEAR_TOLERANCE)
def _rope(gen):
    positions = torch.arange(4)
    return (lambda x: rope_apply(x, positions)), [_randn(gen, 2, 4, 8)]


@register("fft2d_real", LINEAR_TOLERANCE)
def _fft(gen):
    return fft2d_real, [_randn(gen, 4, 8)]


@register("ifft2d_real", LINEAR_TOLERANCE)
def _ifft(gen):
    return ifft2d_real, [_randn(gen, 4, 8)]


@register("spectral_self_attention")
def _self_attention(gen):
    module = _perturb_parameters(SpectralSelfAttention(8, 2, **_adln_kwargs()).double(), gen)
    cond = _cond()
    return (lambda z: module(z, cond)), [_randn(gen, 1, 4, 8)]


@register("spectral_cross_attention")
def _cross_attention(gen):
    module = _perturb_parameters(SpectralCrossAttention(8, 2, **_adln_kwargs()).double(), gen)
    cond = _cond()
    return (lambda z, text: module(z, text, cond)), [_randn(gen, 1, 4, 8), _randn(gen, 1, 3, 8)]


@register("mfi_head")
def _mfi_head(gen):
    head = _perturb_parameters(MFIHead(2, 2, 4, hidden=6).double(), gen)
    return (lambda z_c: mfi_head(head, z_c)), [_randn(gen, 2, 2, 2, 2, 2)]


@register("vae_loss")
def _vae_loss(gen):
    head = _perturb_parameters(MFIHead(2, 2, 4, hidden=6).double(), gen)
    V = _randn(gen, 2, 3, 4, 4, 4)
    z_q = _randn(gen, 2, 2, 2, 2, 2)
    true_frame = torch.tensor([[1], [3]])

    def terms(z_c, V_hat):
        p = mfi_head(head, z_c).gather(1, true_frame).squeeze(1)
        report = vae_loss(V, V_hat, z_c, z_q, beta=0.25, mfi_prob_true=p)
        # codebook reaches z_c only through a stop-gradient
        return torch.stack([report.rec, report.commit, report.mfi])

    return terms, [_randn(gen, 2, 2, 2, 2, 2), _randn(gen, 2, 3, 4, 4, 4)]


@register("straight_through")
def _straight_through(gen):
    decoder = _perturb_parameters(nn.Sequential(nn.ConvTranspose3d(2, 3, 2, stride=2), nn.SiLU()).double(), gen)
    V = _randn(gen, 1, 3, 2, 4, 4)
    # with z_q == z_c the copied gradient is the exact decoder-loss gradient
    return (lambda z: F.mse_loss(decoder(straight_through(z, z)), V).reshape(1)), [_randn(gen, 1, 2, 1, 2, 2)]


@register("lora_forward")
def _lora(gen):
    base = _perturb_parameters(nn.Linear(8, 8).double(), gen)
    return (lambda x, down, up: lora_forward(x, base, down, up)), [
        _randn(gen, 3, 8),
        _randn(gen, 2, 8),
        _randn(gen, 8, 2),
    ]


@register("diffusion_loss")
def _diffusion_loss(gen):
    K = 5
    z0 = torch.tensor([0, 1, 2, 3, 4, 1])
    zt = torch.tensor([K, 1, K, 3, K, K])
    return (lambda logits: diffusion_loss(logits, z0, zt, K).value), [_randn(gen, 6, K)]


@register("denoiser_forward")
def _denoiser(gen):
    cfg = DenoiserConfig(codebook_size=6, width=8, heads=2, blocks=1, text_dim=4, max_text_len=3, max_steps=10)
    model = _perturb_parameters(SpectralDenoiser(cfg).double(), gen, scale=0.2)
    t = torch.tensor([3])
    cond = DenoiserCondition(fps=torch.tensor([8]), text=_randn(gen, 1, 2, 4))
    return (lambda h: model.head(model.forward_embeddings(h, t, cond))), [_randn(gen, 1, 4, 8)]


def max_relative_error(
    fn: Callable[..., Tensor], inputs: List[Tensor], gen: torch.Generator, h: float = DEFAULT_STEP
) -> Tuple[float, int]:
    inputs = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = fn(*inputs)
    weights = _randn(gen, *out.shape)
    analytic = torch.autograd.grad((out * weights).sum(), inputs, allow_unused=True)

    worst, scale, n_elements = 0.0, 0.0, 0
    with torch.no_grad():
        for x, g in zip(inputs, analytic):
            g = torch.zeros_like(x) if g is None else g
            flat = x.view(-1)
            numeric = torch.zeros_like(flat)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + h
                plus = float((fn(*inputs) * weights).sum())
                flat[i] = orig - h
                minus = float((fn(*inputs) * weights).sum())
                flat[i] = orig
                numeric[i] = (plus - minus) / (2 * h)
            worst = max(worst, float((g.reshape(-1) - numeric).abs().max()))
            scale = max(scale, float(g.abs().max()))
            n_elements += flat.numel()
    return worst / max(scale, 1e-12), n_elements


def gradcheck(target: str, seed: int = 0) -> GradcheckReport:
    if target not in REGISTRY:
        raise ValidationError(f"Unknown gradcheck target '{target}', expected one of {list_targets()}")
    spec = REGISTRY[target]
    gen = torch.Generator()
    gen.manual_seed(seed)
    start = time.time()
    fn, inputs = spec.build(gen)
    error, n_elements = max_relative_error(fn, inputs, gen)
    report = GradcheckReport(
        target=target, max_rel_error=error, tolerance=spec.tolerance, n_elements=n_elements, elapsed=time.time() - start
    )
    status = "ok" if report.passed else "FAILED"
    logger.info(f"gradcheck {target}: max rel err {error:.2e} (tol {spec.tolerance:.0e}) {status}")
    return report


def gradcheck_all(seed: int = 0) -> List[GradcheckReport]:
    return [gradcheck(name, seed) for name in list_targets()]
