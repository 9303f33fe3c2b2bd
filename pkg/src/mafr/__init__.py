"""Fusion-restoration anomaly detection on precomputed 2D / 3D feature maps."""
from .anomaly import AnomalyMap, FusionStrategy, MapKind, infer
from .config import RunConfig
from .estimator import MAFRDetector
from .features import FeatureFormatError, FeatureMap, Modality, PointFeatureSet
from .io import DatasetManifest, load_feature_map, save_feature_map
from .losses import LossBreakdown, LossWeights
from .network import ModelConfig, ModelParams
from .training import NumericalError, TrainConfig

__all__ = [
    "AnomalyMap",
    "DatasetManifest",
    "FeatureFormatError",
    "FeatureMap",
    "FusionStrategy",
    "LossBreakdown",
    "LossWeights",
    "MAFRDetector",
    "MapKind",
    "ModelConfig",
    "ModelParams",
    "Modality",
    "NumericalError",
    "PointFeatureSet",
    "RunConfig",
    "TrainConfig",
    "infer",
    "load_feature_map",
    "save_feature_map",
]
__version__ = "0.1.0"
