"""
Internal schemas for maura tabular artifacts using Pandera
"""

from .manifest_schema import ManifestSchema, validate_manifest
from .training_log_schema import AblationResultSchema, TrainingLogSchema, validate_ablation_results, validate_training_log

__version__ = "0.1.0"
__all__ = [
    "ManifestSchema",
    "TrainingLogSchema",
    "AblationResultSchema",
    "validate_manifest",
    "validate_training_log",
    "validate_ablation_results",
]
