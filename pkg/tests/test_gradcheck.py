"""
Test cases for the finite-difference gradient suite.
"""

import pytest
import torch

from maura.exceptions import ValidationError
from maura.gradcheck import LINEAR_TOLERANCE, gradcheck, list_targets, max_relative_error

EXPECTED_TARGETS = {
    "se3d",
    "mbconv3d",
    "inception_fused",
    "adln",
    "rope_apply",
    "fft2d_real",
    "ifft2d_real",
    "spectral_self_attention",
    "spectral_cross_attention",
    "mfi_head",
    "vae_loss",
    "straight_through",
    "lora_forward",
    "diffusion_loss",
    "denoiser_forward",
}


class TestGradcheck:
    """Test cases for registered gradient targets"""

    def test_registry(self):
        assert set(list_targets()) == EXPECTED_TARGETS
        assert list_targets() == sorted(list_targets())

    def test_linear_target_tolerance(self):
        report = gradcheck("fft2d_real")
        assert report.tolerance == LINEAR_TOLERANCE
        assert report.passed
        assert report.n_elements > 0

    @pytest.mark.parametrize("target", ["rope_apply", "adln", "lora_forward", "diffusion_loss"])
    def test_cheap_targets_pass(self, target):
        assert gradcheck(target, seed=1).passed

    @pytest.mark.slow
    @pytest.mark.parametrize("target", sorted(EXPECTED_TARGETS))
    def test_every_target_passes(self, target):
        assert gradcheck(target).passed

    def test_unknown_target(self):
        with pytest.raises(ValidationError, match="Unknown gradcheck target"):
            gradcheck("softmax")

    def test_detects_wrong_gradient(self, generator):
        class Wrong(torch.autograd.Function):
            @staticmethod
            def forward(ctx, x):
                return x**2

            @staticmethod
            def backward(ctx, grad):
                return grad  # should be 2x * grad

        x = torch.full((3,), 2.0, dtype=torch.float64)
        error, n = max_relative_error(Wrong.apply, [x], generator)
        assert n == 3
        assert error > 0.1
