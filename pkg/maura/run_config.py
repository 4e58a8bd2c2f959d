#!/usr/bin/env python3
"""
Run configuration files.

A run config is a JSON object with a `version` field and one section per
concern. Every section is parsed into a dataclass, unknown keys are rejected at
every level and all values are validated before any compute starts.

Example (VAE stage):
    {
      "version": 1,
      "stage": "vae",
      "dataset": "data/synth",
      "output_dir": "runs/vae",
      "steps": 5000,
      "batch_size": 8,
      "seed": 0,
      "optimizer": {"lr": 0.001, "schedule": "cosine"},
      "vae": {"base_channels": 32, "latent_channels": 8}
    }
"""

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

from maura.adapt_inpaint import LoraConfig
from maura.constants import (
    CONFIG_VERSION,
    DEFAULT_CFG_SCALE,
    DEFAULT_COND_DROPOUT,
    DEFAULT_DIFFUSION_STEPS,
    FRAME_MASK_RATIO_RANGE,
    PATCH_MASK_RATIO_RANGE,
    STAGE_DEFAULTS,
    VALID_PATCH_SIZES,
)
from maura.exceptions import DatasetFormatError, ValidationError
from maura.maskdiff import SCHEDULE_SHAPES
from maura.spectral import DenoiserConfig
from maura.vae3d import Vae3dConfig

STAGES = ("vae", "diffusion", "inpaint")
LR_SCHEDULES = ("cosine", "linear")


def _reject_unknown(cls, data: Dict, where: str) -> None:
    if not isinstance(data, dict):
        raise ValidationError(f"{where} must be a JSON object, got {type(data).__name__}")
    unknown = set(data) - {f.name for f in fields(cls)}
    if unknown:
        raise ValidationError(f"Unknown keys in {where}: {sorted(unknown)}")


@dataclass
class OptimizerConfig:
    """AdamW with decoupled weight decay, LR schedule and gradient clipping."""

    kind: str = "adamw"
    lr: float = 1e-3
    weight_decay: float = 0.01
    schedule: str = "cosine"
    grad_clip: Optional[float] = 2.5
    betas: Tuple[float, float] = (0.9, 0.999)

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.kind != "adamw":
            raise ValidationError(f"optimizer.kind='{self.kind}' must be 'adamw'")
        if self.lr <= 0:
            raise ValidationError(f"optimizer.lr={self.lr} must be > 0")
        if self.weight_decay < 0:
            raise ValidationError(f"optimizer.weight_decay={self.weight_decay} must be >= 0")
        if self.schedule not in LR_SCHEDULES:
            raise ValidationError(f"optimizer.schedule='{self.schedule}' must be one of {LR_SCHEDULES}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValidationError(f"optimizer.grad_clip={self.grad_clip} must be > 0 or null")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ValidationError(f"optimizer.betas={self.betas} must be two values in [0, 1)")

    @classmethod
    def for_stage(cls, stage: str) -> "OptimizerConfig":
        return cls(**STAGE_DEFAULTS[stage])


@dataclass
class DiffusionConfig:
    T: int = DEFAULT_DIFFUSION_STEPS
    schedule: str = "linear"
    cond_dropout: float = DEFAULT_COND_DROPOUT

    def __post_init__(self):
        if self.T < 1:
            raise ValidationError(f"diffusion.T={self.T} must be >= 1")
        if self.schedule not in SCHEDULE_SHAPES:
            raise ValidationError(f"diffusion.schedule='{self.schedule}' must be one of {SCHEDULE_SHAPES}")
        if not 0.0 <= self.cond_dropout < 1.0:
            raise ValidationError(f"diffusion.cond_dropout={self.cond_dropout} must be in [0, 1)")


@dataclass
class MaskingConfig:
    """VAE-stage masking: patch ratio ramp and full-frame probability ramp."""

    patch_size: int = 16
    patch_ratio: Tuple[float, float] = PATCH_MASK_RATIO_RANGE
    frame_ratio: Tuple[float, float] = FRAME_MASK_RATIO_RANGE
    enabled: bool = True

    def __post_init__(self):
        self.patch_ratio = tuple(self.patch_ratio)
        self.frame_ratio = tuple(self.frame_ratio)
        if self.patch_size not in VALID_PATCH_SIZES:
            raise ValidationError(f"masking.patch_size={self.patch_size} must be one of {VALID_PATCH_SIZES}")
        for name in ("patch_ratio", "frame_ratio"):
            lo, hi = getattr(self, name)
            if not 0.0 <= lo <= hi <= 1.0:
                raise ValidationError(f"masking.{name}=({lo}, {hi}) needs 0 <= lo <= hi <= 1")


@dataclass
class InpaintConfig:
    sketch_enabled: bool = True
    eval_steps: int = 10
    cfg_scale: float = 1.0
    eval_clips: int = 4

    def __post_init__(self):
        if self.eval_steps < 1:
            raise ValidationError(f"inpaint.eval_steps={self.eval_steps} must be >= 1")
        if self.eval_clips < 1:
            raise ValidationError(f"inpaint.eval_clips={self.eval_clips} must be >= 1")


@dataclass
class RunConfig:
    stage: str
    dataset: str
    output_dir: str
    steps: int
    batch_size: int
    version: int = CONFIG_VERSION
    seed: int = 0
    max_clips: Optional[int] = None
    log_every: int = 50
    checkpoint_every: int = 0
    optimizer: Optional[OptimizerConfig] = None
    vae: Vae3dConfig = field(default_factory=Vae3dConfig)
    masking: MaskingConfig = field(default_factory=MaskingConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    inpaint: InpaintConfig = field(default_factory=InpaintConfig)
    vae_checkpoint: Optional[str] = None
    diffusion_checkpoint: Optional[str] = None

    def __post_init__(self):
        if self.optimizer is None and self.stage in STAGES:
            self.optimizer = OptimizerConfig.for_stage(self.stage)
        self.validate()

    def validate(self) -> None:
        if self.version != CONFIG_VERSION:
            raise ValidationError(f"config version {self.version} is not supported (expected {CONFIG_VERSION})")
        if self.stage not in STAGES:
            raise ValidationError(f"stage='{self.stage}' must be one of {STAGES}")
        if self.steps < 1 or self.batch_size < 1:
            raise ValidationError(f"steps={self.steps} and batch_size={self.batch_size} must be >= 1")
        if self.seed < 0:
            raise ValidationError(f"seed={self.seed} must be >= 0")
        if self.max_clips is not None and self.max_clips < 1:
            raise ValidationError(f"max_clips={self.max_clips} must be >= 1")
        if self.log_every < 1 or self.checkpoint_every < 0:
            raise ValidationError("log_every must be >= 1 and checkpoint_every >= 0")
        if self.stage == "diffusion" and not self.vae_checkpoint:
            raise ValidationError("stage 'diffusion' needs vae_checkpoint")
        if self.stage == "inpaint" and not self.diffusion_checkpoint:
            raise ValidationError("stage 'inpaint' needs diffusion_checkpoint")
        if self.stage == "diffusion" and self.denoiser.max_steps != self.diffusion.T:
            raise ValidationError(
                f"denoiser.max_steps={self.denoiser.max_steps} must equal diffusion.T={self.diffusion.T}"
            )

    def to_dict(self) -> Dict:
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        for name in ("vae", "denoiser", "lora"):
            data[name] = data[name].to_dict()
        for name in ("optimizer", "masking", "diffusion", "inpaint"):
            section = asdict(data[name])
            data[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
        return data

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")
        return path


SECTIONS = {
    "optimizer": OptimizerConfig,
    "masking": MaskingConfig,
    "diffusion": DiffusionConfig,
    "inpaint": InpaintConfig,
}
CONFIG_SECTIONS = {"vae": Vae3dConfig, "denoiser": DenoiserConfig, "lora": LoraConfig}


def parse_run_config(data: Dict) -> RunConfig:
    """Build a validated RunConfig from a decoded JSON object."""
    _reject_unknown(RunConfig, data, "run config")
    if "version" not in data:
        raise ValidationError("run config needs a 'version' field")
    kwargs = dict(data)
    for name, cls in SECTIONS.items():
        if name in kwargs:
            _reject_unknown(cls, kwargs[name], name)
            kwargs[name] = cls(**kwargs[name])
    for name, cls in CONFIG_SECTIONS.items():
        if name in kwargs:
            if not isinstance(kwargs[name], dict):
                raise ValidationError(f"{name} must be a JSON object")
            kwargs[name] = cls.from_dict(kwargs[name])
    try:
        return RunConfig(**kwargs)
    except TypeError as e:
        raise ValidationError(f"invalid run config: {e}") from e


def load_run_config(path: Union[str, Path]) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ValidationError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise DatasetFormatError(path, f"invalid JSON: {e}") from e
    return parse_run_config(data)
