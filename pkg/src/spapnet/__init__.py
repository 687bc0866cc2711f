"""Pose-based Parkinson's tremor classification with a locally connected GNN."""

from .estimator import PoseNormalizer, SPAPNetClassifier
from .graph import SkeletalGraph, build_graph, squeeze_schedule
from .model import ModelConfig, SPAPNet, attention_weights
from .train import FoldPlan, TrainConfig, focal_loss, make_folds

__all__ = [
    "FoldPlan",
    "ModelConfig",
    "PoseNormalizer",
    "SPAPNet",
    "SPAPNetClassifier",
    "SkeletalGraph",
    "TrainConfig",
    "attention_weights",
    "build_graph",
    "focal_loss",
    "make_folds",
    "squeeze_schedule",
]

__version__ = "0.1.0"
