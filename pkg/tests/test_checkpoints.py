"""
Test cases for vae, diffusion and adapter checkpoints.
"""

import pytest
import torch

from maura.adapt_inpaint import LoraConfig, build_inpaint_model
from maura.checkpoints import (
    load_adapter,
    load_diffusion,
    load_vae,
    save_adapter,
    save_diffusion,
    save_vae,
)
from maura.container import read_bundle
from maura.exceptions import CheckpointIntegrityError, ValidationError
from maura.maskdiff import build_schedule
from maura.spectral import DenoiserConfig, SpectralDenoiser
from maura.vae3d import Vae3d


@pytest.fixture
def vae(tiny_vae_cfg):
    torch.manual_seed(0)
    return Vae3d(tiny_vae_cfg).eval()


@pytest.fixture
def denoiser(tiny_denoiser_cfg):
    torch.manual_seed(1)
    return SpectralDenoiser(tiny_denoiser_cfg).eval()


@pytest.fixture
def diffusion_path(tmp_path, vae, denoiser):
    path = tmp_path / "diffusion.maura"
    save_diffusion(path, denoiser, vae, build_schedule(10, "cosine"))
    return path


class TestVaeCheckpoint:
    """Test cases for autoencoder checkpoints"""

    def test_round_trip(self, tmp_path, vae):
        path = tmp_path / "vae.maura"
        save_vae(path, vae, extra={"step": 3})
        loaded = load_vae(path)
        assert loaded.cfg == vae.cfg
        for (name, a), (_, b) in zip(vae.state_dict().items(), loaded.state_dict().items()):
            assert torch.equal(a, b), name
        header, _ = read_bundle(path)
        assert header["kind"] == "vae" and header["step"] == 3

    def test_wrong_kind(self, diffusion_path):
        with pytest.raises(ValidationError, match="expected a 'vae'"):
            load_vae(diffusion_path)


class TestDiffusionCheckpoint:
    """Test cases for denoiser + autoencoder bundles"""

    def test_round_trip(self, diffusion_path, vae, denoiser):
        bundle = load_diffusion(diffusion_path)
        assert bundle.schedule.T == 10 and bundle.schedule.shape == "cosine"
        assert bundle.denoiser.cfg == denoiser.cfg
        z = torch.full((1, 8), 16)
        cond = denoiser.condition(["a red circle moves right"])
        torch.testing.assert_close(bundle.denoiser(z, torch.tensor([5]), cond), denoiser(z, torch.tensor([5]), cond))
        tokens = torch.zeros(1, 2, 2, 2, dtype=torch.long)
        torch.testing.assert_close(bundle.vae.detokenize(tokens), vae.detokenize(tokens))

    def test_vae_arrays_are_prefixed(self, diffusion_path):
        _, arrays = read_bundle(diffusion_path)
        assert any(name.startswith("vae.") for name in arrays)
        assert all(name.startswith(("vae.", "denoiser.")) for name in arrays)

    def test_codebook_mismatch(self, tmp_path, vae):
        other = SpectralDenoiser(DenoiserConfig(codebook_size=32, width=16, heads=2, blocks=1, text_dim=8))
        with pytest.raises(ValidationError, match="does not match"):
            save_diffusion(tmp_path / "bad.maura", other, vae, build_schedule(10))


class TestAdapterCheckpoint:
    """Test cases for adapter checkpoints tied to their base"""

    @pytest.fixture
    def trained_adapter(self, tmp_path, diffusion_path):
        bundle = load_diffusion(diffusion_path)
        cfg = LoraConfig(rank=4)
        model = build_inpaint_model(bundle.denoiser, cfg)
        with torch.no_grad():
            for p in model.parameters():
                if p.requires_grad:
                    p.add_(0.01)
        path = tmp_path / "adapter.maura"
        save_adapter(path, model, cfg, bundle.content_hash)
        return path, model

    def test_round_trip(self, trained_adapter, diffusion_path):
        path, model = trained_adapter
        loaded = load_adapter(path, load_diffusion(diffusion_path))
        expected = dict(model.named_parameters())
        for name in model.declared_trainable_names():
            torch.testing.assert_close(dict(loaded.named_parameters())[name], expected[name])

    def test_only_adapter_arrays_stored(self, trained_adapter):
        path, model = trained_adapter
        header, arrays = read_bundle(path)
        assert set(arrays) == model.declared_trainable_names()
        assert header["lora_config"]["rank"] == 4

    def test_base_mismatch(self, tmp_path, trained_adapter, vae, tiny_denoiser_cfg):
        path, _ = trained_adapter
        torch.manual_seed(99)
        other_path = tmp_path / "other.maura"
        save_diffusion(other_path, SpectralDenoiser(tiny_denoiser_cfg), vae, build_schedule(10, "cosine"))
        with pytest.raises(CheckpointIntegrityError, match="trained on base"):
            load_adapter(path, load_diffusion(other_path))
