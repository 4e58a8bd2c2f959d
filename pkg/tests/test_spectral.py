"""
Test cases for the spectral Transformer denoiser and its building blocks.
"""

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from maura.container import write_array
from maura.exceptions import ValidationError
from maura.spectral import (
    AdLN,
    CondSignal,
    DenoiserCondition,
    DenoiserConfig,
    SpectralCrossAttention,
    SpectralDenoiser,
    SpectralSelfAttention,
    ToyTextEncoder,
    denoiser_forward,
    fft2d_real,
    ifft2d_real,
    load_text_embeddings,
    rope_apply,
    sinusoidal_embedding,
    toy_text_encoder,
)

CAPTION = "a red circle moves right"


@pytest.fixture
def denoiser(tiny_denoiser_cfg):
    torch.manual_seed(0)
    return SpectralDenoiser(tiny_denoiser_cfg).eval()


@pytest.fixture
def signal():
    return CondSignal(t=torch.tensor([3, 7]), fps=torch.tensor([8, 24]))


class TestFourier:
    """Test cases for the real-part 2D transforms"""

    def test_matches_numpy(self, generator):
        x = torch.randn(2, 6, 5, generator=generator, dtype=torch.float64)
        np.testing.assert_allclose(fft2d_real(x).numpy(), np.fft.fft2(x.numpy()).real, atol=1e-10)
        np.testing.assert_allclose(ifft2d_real(x).numpy(), np.fft.ifft2(x.numpy()).real, atol=1e-12)

    def test_linear(self, generator):
        a = torch.randn(4, 8, generator=generator, dtype=torch.float64)
        b = torch.randn(4, 8, generator=generator, dtype=torch.float64)
        torch.testing.assert_close(fft2d_real(2 * a - b), 2 * fft2d_real(a) - fft2d_real(b))

    def test_round_trip_is_a_projection(self, generator):
        for _ in range(100):
            x = torch.randn(6, 8, generator=generator, dtype=torch.float64)
            once = ifft2d_real(fft2d_real(x))
            twice = ifft2d_real(fft2d_real(once))
            assert float((twice - once).norm()) <= 1e-6 * float(x.norm())

    def test_constant_input(self):
        x = torch.ones(3, 4, dtype=torch.float64)
        f = fft2d_real(x)
        assert float(f[0, 0]) == pytest.approx(12.0)
        assert float(f.abs().sum()) == pytest.approx(12.0)
        # normalized inverse of the DC-only spectrum is the constant again
        torch.testing.assert_close(ifft2d_real(f), x)


class TestRope:
    """Test cases for rotary position embedding"""

    @settings(max_examples=30, deadline=None)
    @given(position=st.integers(min_value=0, max_value=4096))
    def test_preserves_norm(self, position):
        x = torch.linspace(-1, 1, 8, dtype=torch.float64)
        torch.testing.assert_close(rope_apply(x, position).norm(), x.norm())

    def test_position_zero_is_identity(self):
        x = torch.randn(5, 6)
        torch.testing.assert_close(rope_apply(x, torch.zeros(5, dtype=torch.long)), x)

    @pytest.mark.parametrize("offset", range(65))
    def test_scores_depend_on_offset_only(self, offset, generator):
        q = torch.randn(8, generator=generator, dtype=torch.float64)
        k = torch.randn(8, generator=generator, dtype=torch.float64)
        scores = [float(torch.dot(rope_apply(q, base + offset), rope_apply(k, base))) for base in (0, 1, 5, 37, 500)]
        assert max(scores) - min(scores) <= 1e-6

    def test_odd_dim_rejected(self):
        with pytest.raises(ValidationError, match="even"):
            rope_apply(torch.zeros(3, 5), torch.arange(3))

    def test_sinusoidal_embedding_shape(self):
        emb = sinusoidal_embedding(torch.arange(4), 7)
        assert emb.shape == (4, 7)
        assert float(emb[0, 0]) == 0.0 and float(emb[0, 3]) == 1.0


class TestAdLN:
    """Test cases for adaptive layer norm"""

    def test_fresh_adln_is_layer_norm(self, signal, generator):
        adln = AdLN(8, max_steps=10)
        x = torch.randn(2, 5, 8, generator=generator)
        torch.testing.assert_close(adln(x, signal), F.layer_norm(x, (8,), eps=1e-6))

    def test_modulation_depends_on_condition(self, signal, generator):
        adln = AdLN(8, max_steps=10)
        torch.nn.init.normal_(adln.modulation[1].weight, std=0.5)
        x = torch.randn(1, 5, 8, generator=generator).expand(2, 5, 8)
        y = adln(x, signal)
        assert not torch.allclose(y[0], y[1])

    @pytest.mark.parametrize("t,fps", [([11], [8]), ([-1], [8]), ([3], [0]), ([3], [61])])
    def test_out_of_range(self, t, fps):
        with pytest.raises(ValidationError):
            AdLN(8, max_steps=10)(torch.zeros(1, 2, 8), CondSignal(t=torch.tensor(t), fps=torch.tensor(fps)))


class TestAttention:
    """Test cases for the Fourier-domain attention blocks"""

    def test_attention_rows_sum_to_one(self, signal, generator):
        attn = SpectralSelfAttention(16, 2, max_steps=10)
        out, weights = attn(torch.randn(2, 6, 16, generator=generator), signal, return_attention=True)
        assert out.shape == (2, 6, 16)
        assert weights.shape == (2, 2, 6, 6)
        torch.testing.assert_close(weights.sum(dim=-1), torch.ones(2, 2, 6))

    @pytest.mark.parametrize("rope_enabled", [True, False])
    def test_without_fft_is_plain_attention(self, signal, generator, rope_enabled):
        torch.manual_seed(0)
        attn = SpectralSelfAttention(16, 2, fft_enabled=False, rope_enabled=rope_enabled, max_steps=10).double()
        torch.nn.init.normal_(attn.adln_in.modulation[1].weight, std=0.3)
        z = torch.randn(2, 6, 16, generator=generator, dtype=torch.float64)

        h = attn.adln_in(z, signal)
        q, k, v = (proj(h).reshape(2, 6, 2, 8).transpose(1, 2) for proj in (attn.q_proj, attn.k_proj, attn.v_proj))
        if rope_enabled:
            q, k = rope_apply(q, torch.arange(6)), rope_apply(k, torch.arange(6))
        message = F.scaled_dot_product_attention(q, k, v).transpose(1, 2).reshape(2, 6, 16)
        expected = attn.adln_out(attn.out_proj(message) + h, signal)

        torch.testing.assert_close(attn(z, signal), expected)

    def test_cross_attention_depends_on_text(self, signal, generator):
        attn = SpectralCrossAttention(16, 2, max_steps=10)
        z = torch.randn(2, 6, 16, generator=generator)
        first = attn(z, torch.randn(2, 4, 16, generator=generator), signal)
        second = attn(z, torch.randn(2, 4, 16, generator=generator), signal)
        assert not torch.allclose(first, second)

    @pytest.mark.parametrize("fft_enabled", [True, False])
    def test_single_text_row_sends_one_message(self, signal, generator, fft_enabled):
        attn = SpectralCrossAttention(16, 2, fft_enabled=fft_enabled, max_steps=10)
        z = torch.randn(2, 6, 16, generator=generator)
        text = torch.full((2, 1, 16), 0.7)
        _, weights = attn(z, text, signal, return_attention=True)
        torch.testing.assert_close(weights, torch.ones(2, 2, 6, 1))

    def test_single_text_row_message_without_fft(self, signal, generator):
        attn = SpectralCrossAttention(16, 2, fft_enabled=False, max_steps=10)
        z = torch.randn(2, 6, 16, generator=generator)
        text = torch.full((2, 1, 16), 0.7)
        message = attn.out_proj(attn.v_proj(text)).expand(2, 6, 16)
        expected = attn.adln_out(message + attn.adln_res(z, signal), signal)
        torch.testing.assert_close(attn(z, text, signal), expected)

    def test_spectral_keys_ignore_padding_mask(self, signal, generator):
        attn = SpectralCrossAttention(16, 2, max_steps=10)
        z = torch.randn(2, 6, 16, generator=generator)
        text = torch.randn(2, 4, 16, generator=generator)
        text[:, 3:] = 0.0
        mask = torch.tensor([[True, True, True, False]] * 2)
        out, weights = attn(z, text, signal, text_mask=mask, return_attention=True)
        torch.testing.assert_close(out, attn(z, text, signal))
        assert bool((weights[..., 3] > 0).all())

    def test_sequence_keys_use_padding_mask(self, signal, generator):
        attn = SpectralCrossAttention(16, 2, fft_enabled=False, max_steps=10)
        z = torch.randn(2, 6, 16, generator=generator)
        text = torch.randn(2, 4, 16, generator=generator)
        mask = torch.tensor([[True, True, True, False]] * 2)
        _, weights = attn(z, text, signal, text_mask=mask, return_attention=True)
        assert float(weights[..., 3].abs().max()) == 0.0
        torch.testing.assert_close(weights.sum(dim=-1), torch.ones(2, 2, 6))

    def test_width_must_divide(self):
        with pytest.raises(ValidationError):
            SpectralSelfAttention(10, 3)


class TestConfig:
    """Test cases for DenoiserConfig"""

    def test_desk_preset(self):
        cfg = DenoiserConfig.from_preset("desk", codebook_size=16)
        assert (cfg.width, cfg.heads, cfg.blocks) == (64, 4, 2)
        assert cfg.mask_id == 16

    def test_unknown_preset(self):
        with pytest.raises(ValidationError):
            DenoiserConfig.from_preset("XL")

    def test_odd_head_dim_with_rope(self):
        with pytest.raises(ValidationError, match="even"):
            DenoiserConfig(width=6, heads=2)
        assert DenoiserConfig(width=6, heads=2, rope_enabled=False).head_dim == 3

    def test_dict_round_trip(self, tiny_denoiser_cfg):
        assert DenoiserConfig.from_dict(tiny_denoiser_cfg.to_dict()) == tiny_denoiser_cfg


class TestTextEncoder:
    """Test cases for the toy caption encoder"""

    def test_unknown_words_map_to_unk(self):
        enc = ToyTextEncoder(4)
        ids = enc.tokenize("a plaid circle")
        assert ids[1] == enc.unk_id and ids[0] != enc.unk_id

    def test_empty_caption(self):
        with pytest.raises(ValidationError):
            ToyTextEncoder(4).tokenize("   ")

    def test_batch_padding_mask(self):
        emb, mask = ToyTextEncoder(4).encode_batch([CAPTION, "a blue square"])
        assert emb.shape == (2, 5, 4)
        assert mask.sum(dim=1).tolist() == [5, 3]

    def test_functional_entry_records_provider(self):
        seq = toy_text_encoder(CAPTION, ToyTextEncoder(4))
        assert seq.provider == "toy"
        assert seq.embeddings.shape == (5, 4)


class TestSpectralDenoiser:
    """Test cases for the full denoiser"""

    def test_output_shape_with_masked_tokens(self, denoiser):
        z = torch.tensor([[0, 16, 3, 16, 15, 1, 16, 2]] * 2)
        logits = denoiser(z, torch.tensor([4, 10]), denoiser.condition([CAPTION, "a blue square moves up"]))
        assert logits.shape == (2, 8, 16)
        assert torch.isfinite(logits).all()

    def test_text_padded_to_max_len(self, denoiser):
        cond = denoiser.condition([CAPTION])
        text, mask = denoiser.text_states(cond, 1, torch.float32)
        assert text.shape == (1, 8, 16)
        assert mask[0].tolist() == [True] * 5 + [False] * 3
        assert float(text[0, 5:].abs().sum()) == 0.0

    def test_unconditional_uses_null_row(self, denoiser):
        _, mask = denoiser.text_states(None, 2, torch.float32)
        assert mask.sum(dim=1).tolist() == [1, 1]
        assert bool(mask[:, 0].all())

    def test_dropped_rows_match_unconditional(self, denoiser):
        cond = denoiser.condition([CAPTION, CAPTION])
        cond.drop = torch.tensor([True, False])
        text, _ = denoiser.text_states(cond, 2, torch.float32)
        null, _ = denoiser.text_states(None, 2, torch.float32)
        torch.testing.assert_close(text[0], null[0])
        assert not torch.allclose(text[1], null[1])

    def test_caption_too_long(self, denoiser):
        cond = denoiser.condition(["a red circle moves right a red circle moves"])
        with pytest.raises(ValidationError, match="max_text_len"):
            denoiser(torch.zeros(1, 4, dtype=torch.long), torch.tensor([1]), cond)

    def test_rejects_out_of_range_tokens(self, denoiser):
        with pytest.raises(ValidationError):
            denoiser(torch.full((1, 4), 17), torch.tensor([1]))
        with pytest.raises(ValidationError):
            denoiser(torch.zeros(1, 4), torch.tensor([1]))

    def test_condition_changes_logits(self, denoiser):
        z = torch.full((1, 8), 16)
        t = torch.tensor([10])
        cond = denoiser.condition([CAPTION])
        assert not torch.allclose(denoiser(z, t, cond), denoiser(z, t, cond.unconditional()))

    def test_functional_entry(self, denoiser):
        z = torch.full((1, 8), 16)
        cond = denoiser.condition([CAPTION], fps=12)
        signal = CondSignal(t=torch.tensor([5]), fps=torch.tensor([12]))
        torch.testing.assert_close(denoiser_forward(z, signal, cond, denoiser), denoiser(z, torch.tensor([5]), cond))

    def test_variant_without_fft_or_rope(self, tiny_denoiser_cfg):
        cfg = DenoiserConfig.from_dict({**tiny_denoiser_cfg.to_dict(), "fft_enabled": False, "rope_enabled": False})
        model = SpectralDenoiser(cfg)
        out = model(torch.zeros(1, 8, dtype=torch.long), torch.tensor([1]), DenoiserCondition(fps=torch.tensor([8])))
        assert out.shape == (1, 8, 16)


class TestExternalEmbeddings:
    """Test cases for loading precomputed text embeddings"""

    def test_load_text_embeddings(self, tmp_path):
        path = write_array(tmp_path / "text.maura", np.ones((3, 8), dtype=np.float32))
        seq = load_text_embeddings(path)
        assert seq.provider == "external"
        assert seq.embeddings.shape == (3, 8)

    def test_rejects_integer_arrays(self, tmp_path):
        path = write_array(tmp_path / "text.maura", np.ones((3, 8), dtype=np.int32))
        with pytest.raises(ValidationError, match="2D float32"):
            load_text_embeddings(path)
