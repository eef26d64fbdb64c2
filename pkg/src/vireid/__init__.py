"""Text-bridged visible-infrared person re-identification.

A three-stream encoder assembly (visible, infrared, shared, text) trained in
three stages: per-identity prompt learning on visible images, shared-encoder
alignment of infrared features to the learned text semantics, and a joint
fine-tuning pass of the modality-specific branches. Evaluation follows the
standard visible-infrared retrieval protocols (CMC, mAP, mINP).
"""

__version__ = "0.1.0"

from .errors import (ArchiveError, CheckpointError, ConfigError, ManifestError,
                     TrainingDiverged, ValidationError)
from .model import Stage, ThreeStreamModel, build_model, save_archive

__all__ = [
    "ArchiveError", "CheckpointError", "ConfigError", "ManifestError",
    "TrainingDiverged", "ValidationError",
    "Stage", "ThreeStreamModel", "build_model", "save_archive",
    "__version__",
]
