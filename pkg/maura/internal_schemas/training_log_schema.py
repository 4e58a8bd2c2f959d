#!/usr/bin/env python3
"""
Pandera schema definitions for training curves and ablation results.
"""

import pandas as pd
import pandera.pandas as pa
from pandera.typing import DataFrame, Series


class TrainingLogSchema(pa.DataFrameModel):
    """
    Schema for the per-step training log written by every stage.

    Stage-specific columns are nullable; a VAE run leaves token_accuracy empty,
    a diffusion run leaves the VAE loss components empty.
    """

    step: Series[int] = pa.Field(ge=0, description="Optimizer step (0-based)")
    stage: Series[str] = pa.Field(isin=["vae", "diffusion", "inpaint"], description="Training stage")
    loss: Series[float] = pa.Field(description="Total training loss")
    lr: Series[float] = pa.Field(ge=0, description="Learning rate used for the step")

    # VAE components
    rec: Series[float] = pa.Field(nullable=True, ge=0, description="Reconstruction MSE")
    codebook: Series[float] = pa.Field(nullable=True, ge=0, description="Codebook term")
    commit: Series[float] = pa.Field(nullable=True, ge=0, description="Commitment term")
    mfi: Series[float] = pa.Field(nullable=True, ge=0, description="Masked-frame-index term")

    # Diffusion / inpainting
    token_accuracy: Series[float] = pa.Field(
        nullable=True, ge=0, le=1, description="Accuracy on masked token positions"
    )

    class Config:
        strict = True
        coerce = True


class AblationResultSchema(pa.DataFrameModel):
    """Schema for the summary frame returned by an ablation sweep."""

    sweep: Series[str] = pa.Field(description="Sweep name (e.g. 'lora_rank')")
    setting: Series[str] = pa.Field(description="Setting label (e.g. 'rank=8')")
    steps: Series[int] = pa.Field(ge=1, description="Training steps run")
    final_loss: Series[float] = pa.Field(description="Mean loss over the final steps")

    class Config:
        strict = True
        coerce = True


def validate_training_log(df: pd.DataFrame) -> pd.DataFrame:
    """
    Validate a training log dataframe against the schema.

    Raises:
        pandera.errors.SchemaError: If validation fails
    """
    return TrainingLogSchema.validate(df)


def validate_ablation_results(df: pd.DataFrame) -> pd.DataFrame:
    """
    Validate an ablation summary dataframe against the schema.

    Raises:
        pandera.errors.SchemaError: If validation fails
    """
    return AblationResultSchema.validate(df)


TrainingLogDF = DataFrame[TrainingLogSchema]
AblationResultDF = DataFrame[AblationResultSchema]
