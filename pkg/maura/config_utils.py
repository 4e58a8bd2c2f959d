#!/usr/bin/env python3
"""
Configuration utilities for the maura pipeline.

This module provides centralized environment loading, logging setup and
seeding used across the CLI, the training stages and the tests.
"""

import os
import random
import sys
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import torch
from dotenv import load_dotenv
from loguru import logger

from maura.exceptions import ValidationError

ENVIRONMENTS = ("dev", "prod")
LOG_LEVELS = ("TRACE", "DEBUG", "INFO", "SUCCESS", "WARNING", "ERROR", "CRITICAL")
ENV_DEFAULTS = {
    "MAURA_LOG_LEVEL": "INFO",
    "MAURA_NUM_THREADS": "1",
    "MAURA_DATA_DIR": "data",
    "MAURA_RUNS_DIR": "runs",
}


def load_environment_config(environment: Optional[str] = None) -> Dict[str, str]:
    """
    Load .env (or .env.dev / .env.prod) and check the MAURA_* settings.

    Args:
        environment: 'dev', 'prod', or None to use the MAURA_ENVIRONMENT variable

    Returns:
        Effective MAURA_* settings with defaults filled in

    Raises:
        ValidationError: unknown environment, unknown MAURA_LOG_LEVEL, or a
            MAURA_NUM_THREADS that is not a positive integer
    """
    if environment is None:
        environment = os.getenv("MAURA_ENVIRONMENT", "")
    if environment and environment not in ENVIRONMENTS:
        raise ValidationError(f"Unknown environment '{environment}', expected one of {list(ENVIRONMENTS)}")

    env_file = f".env.{environment}" if environment else ".env"
    if os.path.exists(env_file):
        # a named environment wins over variables already exported
        load_dotenv(env_file, override=bool(environment))
        logger.info(f"Loaded environment config: {env_file}")
    elif environment:
        logger.warning(f"Environment config file not found: {env_file}")

    settings = {key: os.getenv(key, default) for key, default in ENV_DEFAULTS.items()}
    if settings["MAURA_LOG_LEVEL"].upper() not in LOG_LEVELS:
        raise ValidationError(f"MAURA_LOG_LEVEL='{settings['MAURA_LOG_LEVEL']}' is not one of {list(LOG_LEVELS)}")
    threads = settings["MAURA_NUM_THREADS"].strip()
    if not threads.isdigit() or int(threads) < 1:
        raise ValidationError(f"MAURA_NUM_THREADS='{threads}' must be a positive integer")
    logger.debug(f"maura settings: {settings}")
    return settings



def configure_logging(level: Optional[str] = None) -> None:
    """
    Replace the default loguru sink with one at the configured level.

    Args:
        level: Log level name, or None to use MAURA_LOG_LEVEL (default INFO)
    """
    level = (level or os.getenv("MAURA_LOG_LEVEL", "INFO")).upper()
    logger.remove()
    logger.add(sys.stderr, level=level)

    log_file = os.getenv("MAURA_LOG_FILE")
    if log_file:
        logger.add(log_file, level="DEBUG")
        logger.debug(f"File logging enabled: {log_file}")


def get_num_threads() -> int:
    """Thread count for torch; 1 keeps runs bitwise reproducible."""
    return int(os.getenv("MAURA_NUM_THREADS", "1"))


def get_data_dir() -> Path:
    return Path(os.getenv("MAURA_DATA_DIR", "data"))


def get_runs_dir() -> Path:
    return Path(os.getenv("MAURA_RUNS_DIR", "runs"))


def seed_everything(seed: int, deterministic: bool = True) -> None:
    """
    Seed python, numpy and torch generators.

    Args:
        seed: Global seed
        deterministic: Also force deterministic torch kernels and the
                       configured thread count
    """
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)

    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(get_num_threads())
        logger.debug(f"Deterministic mode on, seed={seed}, threads={torch.get_num_threads()}")
