"""Long-short attention with top-k uncompressed segment caching, in a small byte-level LM."""

from .attention import AttentionBundle, SegmentSelection, enhanced_attention
from .config import ConfigError, ModelConfig, validate
from .model import LanguageModel, loss_and_metrics, parameter_count

__all__ = [
    "AttentionBundle",
    "ConfigError",
    "LanguageModel",
    "ModelConfig",
    "SegmentSelection",
    "enhanced_attention",
    "loss_and_metrics",
    "parameter_count",
    "validate",
]
__version__ = "0.1.0"
