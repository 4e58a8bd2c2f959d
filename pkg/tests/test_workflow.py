"""
Test cases for the end-to-end workflow.
"""

import pytest

from maura.workflow import WORKFLOW_STEPS, MauraWorkflow, WorkflowConfig


@pytest.fixture
def workflow_config(tmp_path, tiny_vae_cfg, tiny_denoiser_cfg):
    return WorkflowConfig(
        data_dir=str(tmp_path / "data"),
        runs_dir=str(tmp_path / "runs"),
        n_clips=4,
        vae_steps=2,
        diffusion_steps=2,
        batch_size=2,
        T=10,
        sample_steps=3,
        captions=["a red circle moves right", "a blue square"],
        vae=tiny_vae_cfg,
        denoiser=tiny_denoiser_cfg,
    )


@pytest.mark.integration
class TestMauraWorkflow:
    """Test cases for MauraWorkflow.run"""

    def test_run_completes_every_step(self, tmp_path, workflow_config):
        results = MauraWorkflow(workflow_config).run()

        assert results["success"]
        assert tuple(results["steps_completed"]) == WORKFLOW_STEPS
        assert results["total_clips"] == 4
        assert all(p.exists() for p in results["output_files"])
        assert (tmp_path / "runs" / "samples" / "sample_001" / "sample.gif").exists()
        assert set(results["metrics"]) == {"vae", "diffusion"}

    def test_run_is_deterministic(self, tmp_path, workflow_config):
        MauraWorkflow(workflow_config).run()
        first = (tmp_path / "runs" / "samples" / "sample_000" / "sample_tokens.maura").read_bytes()

        workflow_config.runs_dir = str(tmp_path / "rerun")
        MauraWorkflow(workflow_config).run()
        second = (tmp_path / "rerun" / "samples" / "sample_000" / "sample_tokens.maura").read_bytes()
        assert first == second

    def test_stage_configs_follow_workflow(self, workflow_config):
        workflow = MauraWorkflow(workflow_config)
        diffusion = workflow.diffusion_run_config()
        assert diffusion.denoiser.max_steps == diffusion.diffusion.T == 10
        assert diffusion.denoiser.codebook_size == workflow_config.vae.codebook_size
        assert diffusion.vae_checkpoint.endswith("vae.maura")
        assert workflow.vae_run_config().vae.n_frames == workflow_config.n_frames
