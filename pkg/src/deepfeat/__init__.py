"""Training-free visual saliency prediction from pretrained convolutional
features, plus the evaluation harness used to score predictors against
eye-fixation data."""

from .backbone import (
    BackboneConfig,
    FeatureBundle,
    TorchBackbone,
    load_features,
    save_features,
)
from .errors import DataError, DeepfeatError, ModelError
from .fusion import VARIANTS, FusionConfig, predict, predict_all
from .harness import evaluate_variants, emit_report, load_dataset
from .imaging import ImageTensor, Map2D, load_image
from .metrics import MetricConfig

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig",
    "DataError",
    "DeepfeatError",
    "FeatureBundle",
    "FusionConfig",
    "ImageTensor",
    "Map2D",
    "MetricConfig",
    "ModelError",
    "TorchBackbone",
    "VARIANTS",
    "__version__",
    "emit_report",
    "evaluate_variants",
    "load_dataset",
    "load_features",
    "load_image",
    "predict",
    "predict_all",
    "save_features",
]
