"""Context-aware generic event boundary captioning."""

from gebc.datamodel import CaptionKind, CaptionTriple, ModelConfig, VideoRecord
from gebc.errors import (
    AnnotationError,
    ConfigError,
    DataError,
    FeatureError,
    GEBCError,
    NumericError,
)

__version__ = "0.1.0"

__all__ = [
    "AnnotationError",
    "CaptionKind",
    "CaptionTriple",
    "ConfigError",
    "DataError",
    "FeatureError",
    "GEBCError",
    "ModelConfig",
    "NumericError",
    "VideoRecord",
]
