#!/usr/bin/env python3
"""
Constants for the maura video generation pipeline.

This module contains shared constants used across the pipeline, including
the MAURA1 container codes, the synthetic caption grammar, and the
hyperparameter defaults of each training stage.
"""

import numpy as np

# MAURA1 binary container
MAGIC = b"MAURA1"
FORMAT_VERSION = 1
CONFIG_VERSION = 1
BUNDLE_CODE = 255

# Format: dtype code -> numpy little-endian dtype
DTYPE_CODES = {
    0: np.dtype("<f4"),
    1: np.dtype("u1"),
    2: np.dtype("<i4"),
}
DTYPE_TO_CODE = {dtype: code for code, dtype in DTYPE_CODES.items()}

# Synthetic scenes
SHAPES = ("square", "circle", "triangle")
VALID_PATCH_SIZES = (16, 32)
SPATIAL_DOWNSAMPLE = 16
DEFAULT_FPS = 8
FPS_VOCAB_SIZE = 60  # fps in 1..60

# Named palette used for captions; any RGB triple is named by its nearest entry
PALETTE = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.2),
    "blue": (0.1, 0.2, 0.9),
    "yellow": (0.95, 0.85, 0.1),
    "white": (0.95, 0.95, 0.95),
    "orange": (0.95, 0.5, 0.05),
}
BACKGROUNDS = {
    "black": (0.0, 0.0, 0.0),
    "gray": (0.35, 0.35, 0.35),
    "navy": (0.05, 0.05, 0.3),
}

DIRECTIONS = ("right", "left", "up", "down")

# Caption grammar: "a <color> <shape> moves <direction>" | "a <color> <shape> stays still"
CAPTION_GRAMMAR = (
    ["a", "moves", "stays", "still"]
    + list(PALETTE)
    + list(SHAPES)
    + list(DIRECTIONS)
)
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

# Quantization / diffusion
DEFAULT_BETA = 0.25
DEFAULT_DIFFUSION_STEPS = 30
DEFAULT_CFG_SCALE = 10.0
DEFAULT_COND_DROPOUT = 0.1

# Masking schedules during VAE pretraining (start, end)
PATCH_MASK_RATIO_RANGE = (0.20, 0.60)
FRAME_MASK_RATIO_RANGE = (0.10, 0.50)

# Metrics
PSNR_CAP_DB = 99.0
PSNR_MIN_MSE = 1e-10
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 8
UNAVAILABLE_METRICS = ("lpips", "fvd", "clipsim")

# Spectral transformer width/heads/blocks presets
# Format: preset -> (embedding size, attention heads, blocks)
DENOISER_PRESETS = {
    "desk": (64, 4, 2),
    "S": (1024, 16, 17),
    "M": (1536, 16, 24),
    "L": (2048, 16, 32),
}

# LoRA
LORA_PLACEMENTS = ("attention_kq", "feedforward")
LORA_RANK_SWEEP = (8, 16, 32, 64)

# Codebook sweep for the VQ path
CODEBOOK_SIZE_SWEEP = (256, 1024, 4096, 8000, 12800)

# Per-stage learning rates and gradient clipping, desk-scaled
STAGE_DEFAULTS = {
    "vae": {"lr": 1e-3, "schedule": "cosine", "grad_clip": 2.5},
    "diffusion": {"lr": 1e-3, "schedule": "linear", "grad_clip": 2.5},
    "inpaint": {"lr": 2e-3, "schedule": "cosine", "grad_clip": 2.5},
}

# CLI exit codes
EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
