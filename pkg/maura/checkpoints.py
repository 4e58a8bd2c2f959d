#!/usr/bin/env python3
"""
Checkpoint persistence on top of MAURA1 bundles.

Three kinds share the format:
    - vae:       autoencoder weights + Vae3dConfig
    - diffusion: denoiser weights + the frozen autoencoder under a `vae.` prefix,
                 so generation needs a single file
    - adapter:   adapter and condition-embedding weights only, tied to the
                 content hash of the diffusion checkpoint they were trained on
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np
import torch
import torch.nn as nn
from loguru import logger

from maura.adapt_inpaint import InpaintDenoiser, LoraConfig, build_inpaint_model
from maura.constants import CONFIG_VERSION
from maura.container import read_bundle, write_bundle
from maura.exceptions import CheckpointIntegrityError, ValidationError
from maura.maskdiff import NoiseSchedule, build_schedule
from maura.spectral import DenoiserConfig, SpectralDenoiser
from maura.vae3d import Vae3d, Vae3dConfig

PathLike = Union[str, Path]


def state_to_arrays(module: nn.Module, prefix: str = "", names: Optional[set] = None) -> Dict[str, np.ndarray]:
    arrays = {}
    for name, tensor in module.state_dict().items():
        if names is not None and name not in names:
            continue
        arrays[f"{prefix}{name}"] = tensor.detach().cpu().float().numpy()
    return arrays


def _load_state(module: nn.Module, arrays: Dict[str, np.ndarray], prefix: str = "", strict: bool = True) -> None:
    own = module.state_dict()
    state = {
        name[len(prefix):]: torch.from_numpy(np.array(arr)).to(own[name[len(prefix):]].dtype)
        for name, arr in arrays.items()
        if name.startswith(prefix) and name[len(prefix):] in own
    }
    missing, unexpected = module.load_state_dict(state, strict=False)
    if strict and missing:
        raise CheckpointIntegrityError(f"checkpoint is missing {len(missing)} arrays, e.g. {missing[:3]}")


def _check_kind(header: Dict, path: PathLike, kind: str) -> None:
    if header.get("kind") != kind:
        raise ValidationError(f"{path}: expected a '{kind}' checkpoint, found '{header.get('kind')}'")


def save_vae(path: PathLike, vae: Vae3d, extra: Optional[Dict] = None) -> str:
    header = {"kind": "vae", "config_version": CONFIG_VERSION, "vae_config": vae.cfg.to_dict(), **(extra or {})}
    content_hash = write_bundle(path, header, state_to_arrays(vae))
    logger.info(f"Saved VAE checkpoint to {path} (hash {content_hash[:12]})")
    return content_hash


def load_vae(path: PathLike) -> Vae3d:
    header, arrays = read_bundle(path)
    _check_kind(header, path, "vae")
    vae = Vae3d(Vae3dConfig.from_dict(header["vae_config"]))
    _load_state(vae, arrays)
    return vae.eval()


@dataclass
class DiffusionBundle:
    denoiser: SpectralDenoiser
    vae: Vae3d
    schedule: NoiseSchedule
    header: Dict
    content_hash: str


def save_diffusion(
    path: PathLike, denoiser: SpectralDenoiser, vae: Vae3d, schedule: NoiseSchedule, extra: Optional[Dict] = None
) -> str:
    if denoiser.cfg.codebook_size != vae.codebook_size:
        raise ValidationError(
            f"denoiser K={denoiser.cfg.codebook_size} does not match VAE K={vae.codebook_size}"
        )
    header = {
        "kind": "diffusion",
        "config_version": CONFIG_VERSION,
        "denoiser_config": denoiser.cfg.to_dict(),
        "vae_config": vae.cfg.to_dict(),
        "schedule": {"T": schedule.T, "shape": schedule.shape},
        "vocab_hash": denoiser.text_encoder.vocab_hash(),
        "flags": {"rope_enabled": denoiser.cfg.rope_enabled, "fft_enabled": denoiser.cfg.fft_enabled},
        **(extra or {}),
    }
    arrays = {**state_to_arrays(denoiser, "denoiser."), **state_to_arrays(vae, "vae.")}
    content_hash = write_bundle(path, header, arrays)
    logger.info(f"Saved diffusion checkpoint to {path} (hash {content_hash[:12]})")
    return content_hash


def load_diffusion(path: PathLike) -> DiffusionBundle:
    header, arrays = read_bundle(path)
    _check_kind(header, path, "diffusion")
    denoiser = SpectralDenoiser(DenoiserConfig.from_dict(header["denoiser_config"]))
    if denoiser.text_encoder.vocab_hash() != header["vocab_hash"]:
        raise CheckpointIntegrityError(f"{path}: caption vocabulary differs from the one the model was trained with")
    _load_state(denoiser, arrays, "denoiser.")
    vae = Vae3d(Vae3dConfig.from_dict(header["vae_config"]))
    _load_state(vae, arrays, "vae.")
    schedule = build_schedule(header["schedule"]["T"], header["schedule"]["shape"])
    return DiffusionBundle(
        denoiser=denoiser.eval(), vae=vae.eval(), schedule=schedule, header=header, content_hash=header["content_hash"]
    )


def save_adapter(
    path: PathLike, model: InpaintDenoiser, lora_cfg: LoraConfig, base_hash: str, extra: Optional[Dict] = None
) -> str:
    header = {
        "kind": "adapter",
        "config_version": CONFIG_VERSION,
        "lora_config": lora_cfg.to_dict(),
        "sketch_enabled": model.sketch_enabled,
        "base_hash": base_hash,
        **(extra or {}),
    }
    content_hash = write_bundle(path, header, state_to_arrays(model, names=model.declared_trainable_names()))
    logger.info(f"Saved adapter checkpoint to {path} over base {base_hash[:12]}")
    return content_hash


def load_adapter(path: PathLike, base: DiffusionBundle) -> InpaintDenoiser:
    """Rebuild the adapted inpainting model over `base`; refuses a mismatched base."""
    header, arrays = read_bundle(path)
    _check_kind(header, path, "adapter")
    if header["base_hash"] != base.content_hash:
        raise CheckpointIntegrityError(
            f"{path}: adapter was trained on base {header['base_hash'][:12]}, got {base.content_hash[:12]}"
        )
    model = build_inpaint_model(
        base.denoiser, LoraConfig.from_dict(header["lora_config"]), sketch_enabled=header["sketch_enabled"]
    )
    declared = model.declared_trainable_names()
    if set(arrays) != declared:
        raise CheckpointIntegrityError(f"{path}: adapter arrays do not match the declared adapter layout")
    _load_state(model, arrays, strict=False)
    return model.eval()
