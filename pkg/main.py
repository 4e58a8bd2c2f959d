from loguru import logger

from maura.config_utils import configure_logging, load_environment_config
from maura.workflow import MauraWorkflow, WorkflowConfig


def run_smoke_pipeline():
    """Tiny end-to-end run: a handful of clips and a few hundred steps per stage."""
    config = WorkflowConfig(
        n_clips=8,
        vae_steps=200,
        diffusion_steps=200,
        batch_size=4,
        sample_steps=10,
        runs_dir="runs/smoke",
        data_dir="data/smoke",
    )
    results = MauraWorkflow(config).run()

    logger.info(f"Steps: {results['steps_completed']}")
    for path in results["output_files"]:
        logger.debug(f"  {path}")
    logger.info(f"VAE PSNR: {results['metrics']['vae']['psnr']:.2f} dB")
    logger.info(f"Masked-token accuracy: {results['metrics']['diffusion']['token_accuracy']:.3f}")
    return results


if __name__ == "__main__":
    load_environment_config()
    configure_logging()
    run_smoke_pipeline()
