from .errors import (
    BadLevels,
    ExtractorError,
    UnknownBackbone,
    UnreadableImage,
    WeightsUnavailable,
)
from .extractor import BACKBONES, ExtractorConfig, extract, load_backbone

__all__ = [
    "BACKBONES",
    "BadLevels",
    "ExtractorConfig",
    "ExtractorError",
    "UnknownBackbone",
    "UnreadableImage",
    "WeightsUnavailable",
    "extract",
    "load_backbone",
]
