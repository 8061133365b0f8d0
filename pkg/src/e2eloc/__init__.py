"""End-to-end localization for fine-grained classification, in numpy."""

from .classifier import Classifier, ClassifierConfig
from .localization import AffNet, AffNetConfig, AttNet, AttNetConfig, Localizer, Preprocess, PreprocessConfig, init_identity
from .supervision import BBox, ClassCenters, bbox_to_theta, extract_bbox, mean_feature_map, total_loss

__version__ = "0.1.0"

__all__ = [
    "AffNet",
    "AffNetConfig",
    "AttNet",
    "AttNetConfig",
    "BBox",
    "ClassCenters",
    "Classifier",
    "ClassifierConfig",
    "Localizer",
    "Preprocess",
    "PreprocessConfig",
    "bbox_to_theta",
    "extract_bbox",
    "init_identity",
    "mean_feature_map",
    "total_loss",
]
