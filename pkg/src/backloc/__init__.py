"""Unsupervised object localization via background discovery.

Two stages: mine the background from self-supervised transformer
attention and features, then refine the complementary foreground masks
by self-training a single linear segmentation head against edge-aware
smoothed pseudo-labels.
"""

from .background import DiscoveryConfig, discover
from .bilateral import SolverParams, refine
from .errors import BacklocError, ConfigError, DataError, NumericalError
from .head import SegHeadParams, TrainConfig, train
from .pipeline import InferenceConfig, infer
from .shards import (
    AttentionStack,
    BBox,
    BinaryMask,
    FeatureStack,
    PatchGrid,
    RgbImage,
    Shard,
    SoftMask,
    load_shard,
    write_shard,
)

__version__ = "0.1.0"

__all__ = [
    "AttentionStack",
    "BBox",
    "BacklocError",
    "BinaryMask",
    "ConfigError",
    "DataError",
    "DiscoveryConfig",
    "FeatureStack",
    "InferenceConfig",
    "NumericalError",
    "PatchGrid",
    "RgbImage",
    "SegHeadParams",
    "Shard",
    "SoftMask",
    "SolverParams",
    "TrainConfig",
    "discover",
    "infer",
    "load_shard",
    "refine",
    "train",
    "write_shard",
    "__version__",
]
