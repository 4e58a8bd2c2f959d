"""
Shared fixtures: tiny model configs, a small synthetic dataset and trained stage outputs.
"""

import pytest
import torch

from maura.adapt_inpaint import LoraConfig
from maura.run_config import DiffusionConfig, InpaintConfig, RunConfig
from maura.spectral import DenoiserConfig
from maura.synthdata import generate_dataset, write_dataset
from maura.training import train_diffusion, train_vae
from maura.vae3d import Vae3dConfig


@pytest.fixture
def tiny_vae_cfg():
    """LFQ d=4 (K=16) autoencoder small enough for per-test training."""
    return Vae3dConfig(
        base_channels=4,
        latent_channels=4,
        codebook_size=16,
        mbconv_per_stage=1,
        inception_per_stage=1,
        mfi_hidden=8,
    )


@pytest.fixture
def tiny_denoiser_cfg():
    return DenoiserConfig(
        codebook_size=16, width=16, heads=2, blocks=1, text_dim=8, max_text_len=8, max_steps=10
    )


@pytest.fixture
def samples():
    return generate_dataset(n_clips=4, n_frames=8, size=32, seed=0)


@pytest.fixture
def dataset_dir(tmp_path, samples):
    directory = tmp_path / "data"
    write_dataset(samples, directory)
    return directory


@pytest.fixture
def vae_run_cfg(tmp_path, dataset_dir, tiny_vae_cfg):
    return RunConfig(
        stage="vae",
        dataset=str(dataset_dir),
        output_dir=str(tmp_path / "vae"),
        steps=3,
        batch_size=2,
        log_every=1,
        vae=tiny_vae_cfg,
    )


@pytest.fixture
def generator():
    gen = torch.Generator()
    gen.manual_seed(0)
    return gen


@pytest.fixture
def vae_result(vae_run_cfg):
    return train_vae(vae_run_cfg)


@pytest.fixture
def diffusion_cfg(tmp_path, dataset_dir, tiny_denoiser_cfg, vae_result):
    return RunConfig(
        stage="diffusion",
        dataset=str(dataset_dir),
        output_dir=str(tmp_path / "diffusion"),
        steps=3,
        batch_size=2,
        log_every=1,
        denoiser=tiny_denoiser_cfg,
        diffusion=DiffusionConfig(T=10),
        vae_checkpoint=str(vae_result.checkpoint),
    )


@pytest.fixture
def diffusion_result(diffusion_cfg):
    return train_diffusion(diffusion_cfg)


@pytest.fixture
def inpaint_cfg(tmp_path, dataset_dir, diffusion_result):
    return RunConfig(
        stage="inpaint",
        dataset=str(dataset_dir),
        output_dir=str(tmp_path / "inpaint"),
        steps=2,
        batch_size=2,
        log_every=1,
        lora=LoraConfig(rank=4),
        inpaint=InpaintConfig(eval_steps=2, eval_clips=1),
        diffusion_checkpoint=str(diffusion_result.checkpoint),
    )
