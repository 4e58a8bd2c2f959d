#!/usr/bin/env python3
"""
Pandera schema definitions for synthetic dataset manifests.
"""

import pandas as pd
import pandera.pandas as pa
from pandera.typing import DataFrame, Series

from maura.constants import FPS_VOCAB_SIZE, SHAPES, SPATIAL_DOWNSAMPLE


class ManifestSchema(pa.DataFrameModel):
    """
    Schema for the flattened dataset manifest.

    One row per sample; `manifest.json` entries are flattened into this frame
    before validation (SceneSpec fields become columns, file names get a `_file`
    suffix).
    """

    # Sample identification
    id: Series[str] = pa.Field(unique=True, description="Sample identifier (e.g. 'clip_00003')")
    seed: Series[int] = pa.Field(ge=0, description="Per-clip seed the sample was generated with")

    # Scene spec
    shape: Series[str] = pa.Field(isin=list(SHAPES), description="Object shape identifier")
    caption: Series[str] = pa.Field(str_length={"min_value": 1}, description="Template caption")
    fps: Series[int] = pa.Field(ge=1, le=FPS_VOCAB_SIZE, description="Clip frame rate")
    n_frames: Series[int] = pa.Field(ge=1, description="Frame count N")
    size: Series[int] = pa.Field(gt=0, description="Square frame side in pixels")

    # Array files, relative to the dataset directory
    pixels_file: Series[str] = pa.Field(description="MAURA1 float32 (N, 3, H, W) pixels")
    masks_file: Series[str] = pa.Field(description="MAURA1 uint8 (N, H, W) inpaint masks")
    sketch_file: Series[str] = pa.Field(description="MAURA1 uint8 (H, W) sketch edge map")

    @pa.check("size", name="divisible_by_16")
    def size_divisible(cls, size: Series[int]) -> Series[bool]:
        return size % SPATIAL_DOWNSAMPLE == 0

    class Config:
        strict = True
        coerce = True


def validate_manifest(df: pd.DataFrame) -> pd.DataFrame:
    """
    Validate a flattened manifest dataframe against the schema.

    Args:
        df: DataFrame to validate

    Returns:
        Validated DataFrame

    Raises:
        pandera.errors.SchemaError: If validation fails
    """
    return ManifestSchema.validate(df)


ManifestDF = DataFrame[ManifestSchema]
