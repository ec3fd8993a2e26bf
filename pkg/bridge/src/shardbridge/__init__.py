"""Offline extractor bridge: frozen ViT-S/8 features and attention to
the shard interchange format."""

from .extract import ExtractConfig, extract
from .gt import convert_gt
from .vit import VitS8, build_backbone

__version__ = "0.1.0"

__all__ = ["ExtractConfig", "VitS8", "build_backbone", "convert_gt", "extract", "__version__"]
