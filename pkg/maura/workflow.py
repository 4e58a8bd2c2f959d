#!/usr/bin/env python3
"""
End-to-end orchestration of the video pipeline.

This module provides a single entry point that runs every stage in order:
synthetic data → autoencoder → masked diffusion → caption-to-video samples
"""

import argparse
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

from loguru import logger
from tqdm import tqdm

from maura.config_utils import configure_logging, get_data_dir, get_runs_dir, load_environment_config
from maura.constants import DEFAULT_CFG_SCALE, DEFAULT_DIFFUSION_STEPS, DEFAULT_FPS
from maura.exceptions import MauraError
from maura.generation import generate
from maura.run_config import DiffusionConfig, RunConfig
from maura.spectral import DenoiserConfig
from maura.synthdata import generate_dataset, write_dataset
from maura.training import train_diffusion, train_vae
from maura.vae3d import Vae3dConfig

WORKFLOW_STEPS = ("synth_data", "train_vae", "train_diffusion", "generate")


@dataclass
class WorkflowConfig:
    """Configuration for one pipeline run."""

    data_dir: Optional[str] = None  # None = MAURA_DATA_DIR
    runs_dir: Optional[str] = None  # None = MAURA_RUNS_DIR
    n_clips: int = 32
    n_frames: int = 8
    size: int = 32
    fps: int = DEFAULT_FPS
    seed: int = 0
    workers: int = 1
    vae_steps: int = 5000
    diffusion_steps: int = 5000
    batch_size: int = 8
    T: int = DEFAULT_DIFFUSION_STEPS
    sample_steps: int = DEFAULT_DIFFUSION_STEPS
    cfg_scale: float = DEFAULT_CFG_SCALE
    captions: List[str] = field(default_factory=lambda: ["a red circle moves right"])
    vae: Vae3dConfig = field(default_factory=Vae3dConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)


class MauraWorkflow:
    """
    Runs the stages with file-based handoff: each stage reads what the previous
    one wrote, so any stage can also be rerun alone from the CLI.
    """

    def __init__(self, config: WorkflowConfig):
        self.config = config
        self.data_dir = Path(config.data_dir) if config.data_dir else get_data_dir() / "synth"
        self.runs_dir = Path(config.runs_dir) if config.runs_dir else get_runs_dir()

    def vae_run_config(self) -> RunConfig:
        c = self.config
        return RunConfig(
            stage="vae",
            dataset=str(self.data_dir),
            output_dir=str(self.runs_dir / "vae"),
            steps=c.vae_steps,
            batch_size=c.batch_size,
            seed=c.seed,
            vae=Vae3dConfig.from_dict({**c.vae.to_dict(), "n_frames": c.n_frames}),
        )

    def diffusion_run_config(self) -> RunConfig:
        c = self.config
        denoiser = DenoiserConfig.from_dict(
            {**c.denoiser.to_dict(), "codebook_size": c.vae.codebook_size, "max_steps": c.T}
        )
        return RunConfig(
            stage="diffusion",
            dataset=str(self.data_dir),
            output_dir=str(self.runs_dir / "diffusion"),
            steps=c.diffusion_steps,
            batch_size=c.batch_size,
            seed=c.seed,
            denoiser=denoiser,
            diffusion=DiffusionConfig(T=c.T),
            vae_checkpoint=str(self.runs_dir / "vae" / "vae.maura"),
        )

    def run(self) -> Dict[str, Any]:
        """
        Execute every stage.

        Returns:
            Dictionary with steps_completed, output_files, per-stage metrics and timing
        """
        results: Dict[str, Any] = {
            "success": False,
            "steps_completed": [],
            "output_files": [],
            "metrics": {},
        }
        start_time = time.time()
        c = self.config

        try:
            # Step 1: Synthetic dataset
            logger.info(f"Step 1: Generating {c.n_clips} synthetic clips into {self.data_dir}")
            samples = generate_dataset(c.n_clips, c.n_frames, c.size, c.seed, fps=c.fps, workers=c.workers)
            manifest = write_dataset(samples, self.data_dir)
            results["steps_completed"].append("synth_data")
            results["output_files"].append(self.data_dir / "manifest.json")
            results["total_clips"] = len(manifest)

            # Step 2: Autoencoder
            logger.info(f"Step 2: Training the autoencoder for {c.vae_steps} steps")
            vae_result = train_vae(self.vae_run_config())
            results["steps_completed"].append("train_vae")
            results["output_files"].extend(vae_result.output_files)
            results["metrics"]["vae"] = vae_result.report.to_dict()

            # Step 3: Masked diffusion
            logger.info(f"Step 3: Training the denoiser for {c.diffusion_steps} steps")
            diffusion_result = train_diffusion(self.diffusion_run_config())
            results["steps_completed"].append("train_diffusion")
            results["output_files"].extend(diffusion_result.output_files)
            results["metrics"]["diffusion"] = diffusion_result.report.to_dict()

            # Step 4: Samples
            logger.info(f"Step 4: Generating {len(c.captions)} sample(s)")
            for i, caption in enumerate(tqdm(c.captions, desc="Generating samples", unit="caption")):
                sample = generate(
                    diffusion_result.checkpoint,
                    caption,
                    steps=c.sample_steps,
                    cfg_scale=c.cfg_scale,
                    seed=c.seed + i,
                    out=self.runs_dir / "samples" / f"sample_{i:03d}",
                    fps=c.fps,
                    n_frames=c.n_frames,
                    size=c.size,
                )
                results["output_files"].extend(sample.output_files)
            results["steps_completed"].append("generate")
            results["success"] = True

        except MauraError as e:
            logger.error(f"Workflow stopped after {results['steps_completed']}: {e}")
            results["error"] = str(e)
            raise

        finally:
            results["total_execution_time"] = time.time() - start_time

        logger.info(
            f"Workflow completed: {len(results['steps_completed'])}/{len(WORKFLOW_STEPS)} steps "
            f"in {results['total_execution_time']:.1f}s"
        )
        return results


def main():
    """Main entry point for a full pipeline run."""
    parser = argparse.ArgumentParser(
        description="Run the full video pipeline",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python -m maura.workflow                            # Desk-scale defaults
  python -m maura.workflow --clips 8 --vae-steps 200  # Quick smoke run
  python -m maura.workflow --caption "a blue square moves up"
        """,
    )
    parser.add_argument("--clips", type=int, default=32, help="Number of synthetic clips")
    parser.add_argument("--vae-steps", type=int, default=5000, help="Autoencoder training steps")
    parser.add_argument("--diffusion-steps", type=int, default=5000, help="Denoiser training steps")
    parser.add_argument("--seed", type=int, default=0, help="Seed for every stage")
    parser.add_argument("--caption", action="append", help="Caption to sample (repeatable)")
    parser.add_argument("--runs-dir", type=str, help="Output directory (default: MAURA_RUNS_DIR)")
    args = parser.parse_args()

    load_environment_config()
    configure_logging()
    config = WorkflowConfig(
        n_clips=args.clips,
        vae_steps=args.vae_steps,
        diffusion_steps=args.diffusion_steps,
        seed=args.seed,
        runs_dir=args.runs_dir,
    )
    if args.caption:
        config.captions = args.caption

    results = MauraWorkflow(config).run()
    logger.info("Workflow Results:")
    logger.info(f"- Steps: {results['steps_completed']}")
    logger.info(f"- Files: {len(results['output_files'])}")
    logger.info(f"- Execution Time: {results['total_execution_time']:.2f} seconds")
    return results


if __name__ == "__main__":
    main()
