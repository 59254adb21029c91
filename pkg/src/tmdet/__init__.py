"""Few-shot repeated-pattern detection via template matching and
support-conditioned box regression."""

from .backbone import BackboneConfig, FeatureMap, load_features, save_features
from .boxes import BoxXYWH
from .head import DecodeVariant
from .infer import Detection, InferConfig, detect_few_shot, detect_multi_scale, nms
from .loss import MarginConfig, extended_center_set, giou
from .matching import MatchVariant
from .model import Model, ModelConfig
from .template import Template, roi_align_extract, template_size

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig", "BoxXYWH", "DecodeVariant", "Detection", "FeatureMap",
    "InferConfig", "MarginConfig", "MatchVariant", "Model", "ModelConfig",
    "Template", "detect_few_shot", "detect_multi_scale", "extended_center_set",
    "giou", "load_features", "nms", "roi_align_extract", "save_features",
    "template_size", "__version__",
]
