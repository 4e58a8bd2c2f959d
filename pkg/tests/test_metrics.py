"""
Test cases for reconstruction metrics and metric reports.
"""

import json

import numpy as np
import pytest
import torch

from maura.exceptions import ValidationError
from maura.metrics import MetricReport, masked_region_psnr, psnr, ssim, write_metrics


@pytest.fixture
def frames():
    rng = np.random.default_rng(0)
    return rng.random((4, 3, 16, 16)).astype(np.float32)


class TestPsnr:
    """Test cases for PSNR"""

    def test_identical_is_capped(self, frames):
        assert psnr(frames, frames) == 99.0

    def test_known_value(self):
        a = np.zeros((1, 3, 8, 8))
        b = np.full((1, 3, 8, 8), 0.1)
        assert psnr(a, b) == pytest.approx(20.0)

    def test_symmetric_and_accepts_tensors(self, frames):
        other = np.clip(frames + 0.05, 0, 1)
        assert psnr(frames, other) == pytest.approx(psnr(torch.from_numpy(other), frames))

    def test_masked_region(self, frames):
        other = frames.copy()
        other[:, :, :8] += 0.1
        masks = np.zeros((4, 16, 16))
        masks[:, 8:] = 1
        assert masked_region_psnr(frames, other, masks) == 99.0
        masks[:, :8] = 1
        masks[:, 8:] = 0
        assert masked_region_psnr(frames, other, masks) == pytest.approx(20.0, abs=1e-4)

    def test_empty_mask(self, frames):
        with pytest.raises(ValidationError):
            masked_region_psnr(frames, frames, np.zeros((4, 16, 16)))

    def test_shape_mismatch(self, frames):
        with pytest.raises(ValidationError):
            psnr(frames, frames[:2])


class TestSsim:
    """Test cases for windowed SSIM"""

    def test_identical_is_one(self, frames):
        assert ssim(frames, frames) == pytest.approx(1.0)

    def test_noise_lowers_ssim(self, frames):
        noisy = np.clip(frames + np.random.default_rng(1).normal(0, 0.2, frames.shape), 0, 1)
        assert ssim(frames, noisy) < 0.9

    def test_window_larger_than_frame(self):
        small = np.zeros((1, 3, 4, 4))
        with pytest.raises(ValidationError):
            ssim(small, small)


class TestMetricReport:
    """Test cases for the metric report"""

    def test_unavailable_metrics_are_listed(self):
        data = MetricReport(stage="vae", psnr=30.0).to_dict()
        assert data["lpips"] == data["fvd"] == data["clipsim"] == "unavailable"
        assert data["token_accuracy"] is None

    def test_range_checks(self):
        with pytest.raises(ValidationError):
            MetricReport(stage="vae", psnr=120.0)
        with pytest.raises(ValidationError):
            MetricReport(stage="vae", ssim=1.5)

    def test_write(self, tmp_path):
        path = write_metrics(MetricReport(stage="diffusion", token_accuracy=0.5), tmp_path / "m" / "metrics.json")
        assert json.loads(path.read_text())["token_accuracy"] == 0.5
