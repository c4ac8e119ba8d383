"""Siamese patch matching for side-scan sonar image pairs with nonlinear intensity differences."""

from .detect import DoGParams, FastParams, Keypoint, cross_map_fuse, detect_dog, detect_fast, detect_pair
from .errors import SonarMatchError
from .imagecore import AffineTransform, GrayImage, IntensityCurve, load_pgm, save_pgm
from .match import MatchConfig, MatchResult, baseline_ratio_match, match_images, reject_outliers, render_overlay
from .net import ArchConfig, LossConfig, SiameseModel, load_model, save_model
from .patches import AugmentConfig, Patch, SamplePair, build_dataset
from .train import TrainConfig, evaluate_model, train_model

__version__ = "0.1.0"

__all__ = [
    "AffineTransform", "ArchConfig", "AugmentConfig", "DoGParams", "FastParams", "GrayImage", "IntensityCurve",
    "Keypoint", "LossConfig", "MatchConfig", "MatchResult", "Patch", "SamplePair", "SiameseModel",
    "SonarMatchError", "TrainConfig", "baseline_ratio_match", "build_dataset", "cross_map_fuse", "detect_dog",
    "detect_fast", "detect_pair", "evaluate_model", "load_model", "load_pgm", "match_images", "reject_outliers",
    "render_overlay", "save_model", "save_pgm", "train_model",
]
