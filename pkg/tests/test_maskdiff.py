"""
Test cases for the absorbing mask diffusion process and the reverse sampler.
"""

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from maura.exceptions import ValidationError
from maura.maskdiff import (
    build_schedule,
    cfg_combine,
    diffusion_loss,
    forward_corrupt,
    forward_corrupt_batch,
    forward_corrupt_stepwise,
    masked_token_accuracy,
    reverse_sample,
    sample_timesteps,
)

K = 16


@pytest.fixture
def z0():
    return torch.arange(64).reshape(4, 4, 4) % K


class RecordingDenoiser:
    """Deterministic logits that favour token (position mod K); records what it saw."""

    def __init__(self, offset: float = 0.0):
        self.offset = offset
        self.masked_counts = []
        self.timesteps = []
        self.conditions = []

    def __call__(self, z, t, cond):
        self.masked_counts.append(int((z == K).sum()))
        self.timesteps.append(int(t[0]))
        self.conditions.append(cond)
        batch, seq = z.shape
        logits = torch.zeros(batch, seq, K)
        logits[:, torch.arange(seq), torch.arange(seq) % K] = 5.0 + torch.arange(seq, dtype=torch.float32) / seq
        return logits + self.offset


class TestSchedule:
    """Test cases for the noise schedules"""

    @pytest.mark.parametrize("shape", ["linear", "cosine"])
    def test_endpoints_and_monotone(self, shape):
        sched = build_schedule(30, shape)
        assert sched.cumulative[0] == 0.0 and sched.cumulative[-1] == 1.0
        assert np.all(np.diff(sched.cumulative) > 0)
        assert sched.gamma[0] == 0.0 and sched.gamma[-1] == pytest.approx(1.0)

    def test_linear_gamma(self):
        sched = build_schedule(4, "linear")
        np.testing.assert_allclose(sched.gamma[1:], [1 / 4, 1 / 3, 1 / 2, 1.0])

    def test_cosine_midpoint(self):
        assert build_schedule(10, "cosine").cumulative[5] == pytest.approx(0.5)

    @settings(max_examples=30, deadline=None)
    @given(T=st.integers(min_value=1, max_value=200), shape=st.sampled_from(["linear", "cosine"]))
    def test_gamma_composes_to_cumulative(self, T, shape):
        sched = build_schedule(T, shape)
        survive = np.cumprod(1.0 - sched.gamma)
        np.testing.assert_allclose(1.0 - survive, sched.cumulative, atol=1e-9)

    def test_rejects_bad_args(self):
        with pytest.raises(ValidationError):
            build_schedule(0)
        with pytest.raises(ValidationError):
            build_schedule(10, "sqrt")


class TestForwardCorrupt:
    """Test cases for q(z_t | z_0)"""

    def test_t_zero_is_identity(self, z0):
        assert torch.equal(forward_corrupt(z0, 0, build_schedule(10), K, seed=1), z0)

    def test_t_max_masks_everything(self, z0):
        assert bool((forward_corrupt(z0, 10, build_schedule(10), K, seed=1) == K).all())

    def test_masked_sets_nest_under_shared_seed(self, z0):
        sched = build_schedule(10, "cosine")
        previous = torch.zeros_like(z0, dtype=torch.bool)
        for t in range(11):
            masked = forward_corrupt(z0, t, sched, K, seed=7) == K
            assert bool((masked | ~previous).all())
            previous = masked

    def test_unmasked_positions_keep_value(self, z0):
        zt = forward_corrupt(z0, 5, build_schedule(10), K, seed=2)
        keep = zt != K
        assert torch.equal(zt[keep], z0[keep])

    @pytest.mark.parametrize("t", [10, 20, 30])
    def test_marginal_rate_within_three_sigma(self, t):
        sched = build_schedule(40, "cosine")
        z = torch.zeros(10000, dtype=torch.long)
        rate = float((forward_corrupt(z, t, sched, K, seed=t) == K).float().mean())
        p = sched.cumulative[t]
        assert abs(rate - p) <= 3 * np.sqrt(p * (1 - p) / z.numel())

    def test_stepwise_matches_marginal_rate(self):
        z = torch.zeros(20000, dtype=torch.long)
        rate = float((forward_corrupt_stepwise(z, 6, build_schedule(10, "cosine"), K, seed=0) == K).float().mean())
        assert rate == pytest.approx(build_schedule(10, "cosine").cumulative[6], abs=0.02)

    def test_batch_per_sample_t(self, z0, generator):
        zt = forward_corrupt_batch(z0, torch.tensor([0, 10, 0, 10]), build_schedule(10), K, generator=generator)
        assert torch.equal(zt[0], z0[0])
        assert bool((zt[1] == K).all())

    def test_rejects_mask_in_z0(self, z0):
        z0[0, 0, 0] = K
        with pytest.raises(ValidationError, match="MASK_ID"):
            forward_corrupt(z0, 1, build_schedule(10), K)

    def test_rejects_t_out_of_range(self, z0):
        with pytest.raises(ValidationError):
            forward_corrupt(z0, 11, build_schedule(10), K)

    def test_sample_timesteps_range(self, generator):
        t = sample_timesteps(500, 7, generator)
        assert int(t.min()) >= 1 and int(t.max()) <= 7


class TestDiffusionLoss:
    """Test cases for the masked-position objective"""

    def test_only_masked_positions_count(self):
        z0 = torch.tensor([[1, 2, 3]])
        zt = torch.tensor([[K, 2, K]])
        logits = torch.zeros(1, 3, K)
        logits[0, 1, 0] = 100.0  # wrong at an unmasked position, ignored
        loss = diffusion_loss(logits, z0, zt, K)
        assert loss.n_masked == 2
        assert float(loss.value) == pytest.approx(np.log(K), rel=1e-5)

    def test_empty_mask_warns_and_returns_zero(self):
        z0 = torch.tensor([[1, 2]])
        logits = torch.randn(1, 2, K, requires_grad=True)
        loss = diffusion_loss(logits, z0, z0, K)
        assert loss.empty and float(loss.value) == 0.0
        loss.value.backward()

    def test_masked_accuracy(self):
        z0 = torch.tensor([[1, 2]])
        zt = torch.tensor([[K, K]])
        logits = torch.zeros(1, 2, K)
        logits[0, 0, 1] = 1.0
        logits[0, 1, 5] = 1.0
        assert masked_token_accuracy(logits, z0, zt, K) == 0.5
        assert masked_token_accuracy(logits, z0, z0, K) is None


class TestReverseSample:
    """Test cases for confidence-ordered unmasking"""

    def test_output_free_of_mask(self):
        z = reverse_sample(RecordingDenoiser(), None, build_schedule(10), 5, 1.0, 0, (2, 2, 2), K, batch_size=2)
        assert z.shape == (2, 2, 2, 2)
        assert not bool((z == K).any())

    @pytest.mark.parametrize("steps", [1, 5, 30])
    def test_oracle_recovers_target(self, steps, generator):
        target = torch.randint(0, K, (1, 2, 4, 4), generator=generator)

        def oracle(z, t, cond):
            return torch.nn.functional.one_hot(target.flatten(1), K).float() * 1e4

        z = reverse_sample(oracle, None, build_schedule(30), steps, 10.0, 0, (2, 4, 4), K, unconditional=None)
        assert torch.equal(z, target)

    def test_single_step_commits_everything(self):
        z = reverse_sample(RecordingDenoiser(), None, build_schedule(10), 1, 1.0, 0, 8, K)
        assert not bool((z == K).any())

    def test_masked_counts_follow_schedule(self):
        den = RecordingDenoiser()
        reverse_sample(den, None, build_schedule(4), 4, 1.0, 0, 8, K, argmax=True)
        assert den.masked_counts == [8, 6, 4, 2]
        assert den.timesteps == [4, 3, 2, 1]

    def test_argmax_picks_preferred_tokens(self):
        z = reverse_sample(RecordingDenoiser(), None, build_schedule(4), 4, 1.0, 0, 8, K, argmax=True)
        assert z[0].tolist() == list(range(8))

    def test_deterministic_under_seed(self):
        sched = build_schedule(10)
        a = reverse_sample(RecordingDenoiser(), None, sched, 5, 1.0, 3, 16, K)
        b = reverse_sample(RecordingDenoiser(), None, sched, 5, 1.0, 3, 16, K)
        assert torch.equal(a, b)

    def test_scale_one_skips_unconditional_branch(self):
        den = RecordingDenoiser()
        reverse_sample(den, "cond", build_schedule(4), 4, 1.0, 0, 8, K, unconditional="uncond")
        assert den.conditions == ["cond"] * 4

    def test_guidance_calls_both_branches(self):
        den = RecordingDenoiser()
        reverse_sample(den, "cond", build_schedule(4), 4, 3.0, 0, 8, K, unconditional="uncond")
        assert den.conditions == ["cond", "uncond"] * 4

    def test_identical_branches_make_guidance_a_no_op(self):
        sched = build_schedule(10)
        plain = reverse_sample(RecordingDenoiser(), "c", sched, 5, 1.0, 4, 16, K)
        guided = reverse_sample(RecordingDenoiser(), "c", sched, 5, 7.5, 4, 16, K, unconditional="c")
        assert torch.equal(plain, guided)

    def test_rejects_bad_args(self):
        with pytest.raises(ValidationError):
            reverse_sample(RecordingDenoiser(), None, build_schedule(4), 0, 1.0, 0, 8, K)
        with pytest.raises(ValidationError):
            reverse_sample(RecordingDenoiser(), None, build_schedule(4), 2, 1.0, 0, 8, K, temperature=0.0)

    def test_rejects_wrong_logit_shape(self):
        with pytest.raises(ValidationError):
            reverse_sample(RecordingDenoiser(), None, build_schedule(4), 2, 1.0, 0, 8, K + 1)

    def test_cfg_combine(self):
        cond, uncond = torch.tensor([2.0]), torch.tensor([1.0])
        assert float(cfg_combine(cond, uncond, 1.0)) == 2.0
        assert float(cfg_combine(cond, uncond, 0.0)) == 1.0
        assert float(cfg_combine(cond, uncond, 3.0)) == 4.0
