"""Salience-weighted focal loss training for one-stage object detection."""

from .anchors import AnchorConfig, AssignmentMap, assign_targets, generate_anchors
from .data import AnnotatedImage, DataError, Dataset, SynthConfig, load_dataset, save_dataset, synthesize_dataset
from .estimators import SalienceBiasedDetector, SalienceWeighter
from .evaluation import EvalResult, average_precision, evaluate_dataset
from .geometry import Box, BoxDelta, Detection, decode_deltas, encode_deltas, iou, nms
from .losses import FocalConfig, LossBreakdown, cross_entropy, focal_loss, salience_biased_loss, smooth_l1, total_loss
from .model import DetectorConfig, DetectorNet, load_checkpoint, predict, save_checkpoint
from .salience import (
    FrozenExtractor,
    SalienceStats,
    StaleStatsError,
    compute_stats,
    estimate_salience,
    normalize_salience,
    rank_images,
)
from .train import TrainConfig, Trainer

__version__ = "0.1.0"

__all__ = [
    "AnchorConfig",
    "AnnotatedImage",
    "AssignmentMap",
    "Box",
    "BoxDelta",
    "DataError",
    "Dataset",
    "Detection",
    "DetectorConfig",
    "DetectorNet",
    "EvalResult",
    "FocalConfig",
    "FrozenExtractor",
    "LossBreakdown",
    "SalienceBiasedDetector",
    "SalienceStats",
    "SalienceWeighter",
    "StaleStatsError",
    "SynthConfig",
    "TrainConfig",
    "Trainer",
    "assign_targets",
    "average_precision",
    "compute_stats",
    "cross_entropy",
    "decode_deltas",
    "encode_deltas",
    "estimate_salience",
    "evaluate_dataset",
    "focal_loss",
    "generate_anchors",
    "iou",
    "load_checkpoint",
    "load_dataset",
    "nms",
    "normalize_salience",
    "predict",
    "rank_images",
    "salience_biased_loss",
    "save_checkpoint",
    "save_dataset",
    "smooth_l1",
    "synthesize_dataset",
    "total_loss",
]
