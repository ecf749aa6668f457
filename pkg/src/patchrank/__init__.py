"""Place-recognition retrieval with patch-level VLAD re-ranking.

The engine consumes pre-extracted dense feature maps, builds global and
per-patch locally-aggregated descriptors, and re-orders global-descriptor
shortlists by spatial consistency of mutually matched patches.
"""

from patchrank.types import (
    DatasetManifest,
    FeatureMap,
    ImageEntry,
    PatchConfig,
    Pose,
    ToleranceSpec,
    VladModel,
    validate_model,
)

__all__ = [
    "DatasetManifest",
    "FeatureMap",
    "ImageEntry",
    "PatchConfig",
    "Pose",
    "ToleranceSpec",
    "VladModel",
    "validate_model",
]

__version__ = "0.1.0"
