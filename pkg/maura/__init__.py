"""
maura - desk-scale masked-diffusion video generation and sketch-guided inpainting
"""

from .maskdiff import build_schedule, reverse_sample
from .spectral import DenoiserConfig, SpectralDenoiser
from .vae3d import Vae3d, Vae3dConfig

__version__ = "0.1.0"
__all__ = ["Vae3d", "Vae3dConfig", "SpectralDenoiser", "DenoiserConfig", "build_schedule", "reverse_sample"]
