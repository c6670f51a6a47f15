"""Scikit-learn style estimators wrapping the salience and detection pipelines.

SalienceWeighter is a transformer: fit scans a corpus for salience statistics,
transform turns images into loss weights. SalienceBiasedDetector is the full
trainable detector with fit/predict/score. Both follow the usual conventions:
constructor arguments are stored verbatim, learned state lives in trailing-
underscore attributes, and get_params/set_params work for cloning and grid
search.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import AnnotatedImage, Dataset
from .evaluation import evaluate_dataset
from .model import DetectorConfig, predict
from .salience import FrozenExtractor, compute_stats, estimate_salience, normalize_salience
from .train import TrainConfig, Trainer
from .validation import check_detection_targets, check_images


class SalienceWeighter(BaseEstimator, TransformerMixin):
    """Turns images into per-image loss weights via frozen-extractor salience.

    fit records the corpus minimum and maximum of the raw salience score at
    the chosen tap; transform maps each image's raw score into the
    [new_min, new_max] band, clamping scores outside the fitted range.
    """

    def __init__(
        self,
        tap: str = "C2",
        new_min: float = 0.5,
        new_max: float = 1.0,
        extractor_seed: int = 0,
        extractor_channels: tuple[int, ...] = (8, 16, 32, 64),
    ):
        self.tap = tap
        self.new_min = new_min
        self.new_max = new_max
        self.extractor_seed = extractor_seed
        self.extractor_channels = extractor_channels

    def fit(self, X, y=None):
        images = check_images(X)
        self.extractor_ = FrozenExtractor(seed=self.extractor_seed, channels=tuple(self.extractor_channels))
        self.stats_ = compute_stats(
            images, self.extractor_, taps=(self.tap,), new_min=self.new_min, new_max=self.new_max
        )
        self.n_images_ = len(images)
        return self

    def raw_scores(self, X) -> np.ndarray:
        """Raw (unnormalized) salience score per image."""
        check_is_fitted(self, "stats_")
        images = check_images(X)
        return np.array([estimate_salience(img, self.extractor_, self.tap) for img in images])

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "stats_")
        return np.array([normalize_salience(raw, self.stats_, self.tap) for raw in self.raw_scores(X)])


class SalienceBiasedDetector(BaseEstimator):
    """One-stage detector trained with a salience-weighted classification loss.

    fit expects X as a sequence of (S, S, 3) float images in [0, 1] and y as a
    matching sequence of (boxes, labels) pairs, boxes in (G, 4) corner format.
    predict returns one list of Detection per image; score returns mAP at IoU
    0.5. Set sbl_enabled=False for the unweighted baseline.
    """

    def __init__(
        self,
        num_classes: int | None = None,
        input_size: int | None = None,
        learning_rate: float = 1e-4,
        total_steps: int = 2000,
        decay_interval: int = 800,
        batch_size: int = 2,
        seed: int = 0,
        sbl_enabled: bool = True,
        normalize: bool = True,
        tap: str = "C2",
        new_min: float = 0.5,
        new_max: float = 1.0,
        alpha: float = 0.25,
        gamma: float = 2.0,
        smooth_l1_beta: float = 1.0,
        grad_clip_norm: float = 10.0,
        positive_iou: float = 0.5,
        negative_iou: float = 0.4,
        strides: tuple[int, ...] = (8, 16),
        base_sizes: tuple[float, ...] = (32.0, 64.0),
        aspect_ratios: tuple[float, ...] = (1.0 / 3.0, 1.0, 3.0),
        scale_multipliers: tuple[float, ...] = (2.0, 2.0 ** 0.5, 0.3),
        backbone_channels: tuple[int, ...] = (16, 32, 64, 96),
        head_channels: int = 64,
        prior: float = 0.01,
        extractor_seed: int = 0,
        extractor_channels: tuple[int, ...] = (8, 16, 32, 64),
        score_threshold: float = 0.05,
        nms_threshold: float = 0.3,
    ):
        self.num_classes = num_classes
        self.input_size = input_size
        self.learning_rate = learning_rate
        self.total_steps = total_steps
        self.decay_interval = decay_interval
        self.batch_size = batch_size
        self.seed = seed
        self.sbl_enabled = sbl_enabled
        self.normalize = normalize
        self.tap = tap
        self.new_min = new_min
        self.new_max = new_max
        self.alpha = alpha
        self.gamma = gamma
        self.smooth_l1_beta = smooth_l1_beta
        self.grad_clip_norm = grad_clip_norm
        self.positive_iou = positive_iou
        self.negative_iou = negative_iou
        self.strides = strides
        self.base_sizes = base_sizes
        self.aspect_ratios = aspect_ratios
        self.scale_multipliers = scale_multipliers
        self.backbone_channels = backbone_channels
        self.head_channels = head_channels
        self.prior = prior
        self.extractor_seed = extractor_seed
        self.extractor_channels = extractor_channels
        self.score_threshold = score_threshold
        self.nms_threshold = nms_threshold

    def _dataset_from(self, images, targets, class_names) -> Dataset:
        annotated = [
            AnnotatedImage(
                image_id=f"img_{i:05d}",
                pixels=img,
                boxes=boxes,
                labels=labels,
                difficult=np.zeros(len(labels), dtype=bool),
            )
            for i, (img, (boxes, labels)) in enumerate(zip(images, targets))
        ]
        return Dataset(class_names=class_names, images=annotated)

    def fit(self, X, y):
        images = check_images(X)
        targets = check_detection_targets(y, len(images))
        size = self.input_size if self.input_size is not None else images[0].shape[0]
        for i, img in enumerate(images):
            if img.shape[:2] != (size, size):
                raise ValueError(
                    f"image {i}: expected {size}x{size} pixels, got {img.shape[:2]}"
                )
        observed = max((int(t[1].max()) + 1 for t in targets if t[1].size), default=0)
        num_classes = self.num_classes if self.num_classes is not None else max(observed, 1)
        if observed > num_classes:
            raise ValueError(f"labels reference {observed} classes but num_classes={num_classes}")
        class_names = tuple(f"class{i}" for i in range(num_classes))

        dataset = self._dataset_from(images, targets, class_names)
        self.detector_config_ = DetectorConfig(
            num_classes=num_classes,
            input_size=size,
            strides=tuple(self.strides),
            base_sizes=tuple(self.base_sizes),
            aspect_ratios=tuple(self.aspect_ratios),
            scale_multipliers=tuple(self.scale_multipliers),
            backbone_channels=tuple(self.backbone_channels),
            head_channels=self.head_channels,
            prior=self.prior,
        )
        train_config = TrainConfig(
            learning_rate=self.learning_rate,
            total_steps=self.total_steps,
            decay_interval=self.decay_interval,
            batch_size=self.batch_size,
            seed=self.seed,
            sbl_enabled=self.sbl_enabled,
            normalize=self.normalize,
            tap=self.tap,
            new_min=self.new_min,
            new_max=self.new_max,
            alpha=self.alpha,
            gamma=self.gamma,
            smooth_l1_beta=self.smooth_l1_beta,
            grad_clip_norm=self.grad_clip_norm,
            positive_iou=self.positive_iou,
            negative_iou=self.negative_iou,
        )
        extractor = stats = None
        if self.sbl_enabled:
            extractor = FrozenExtractor(seed=self.extractor_seed, channels=tuple(self.extractor_channels))
            stats = compute_stats(
                dataset, extractor, taps=(self.tap,), new_min=self.new_min, new_max=self.new_max
            )
        trainer = Trainer(dataset, self.detector_config_, train_config, stats=stats, extractor=extractor)
        result = trainer.run()
        self.net_ = result.net
        self.stats_ = stats
        self.classes_ = np.arange(num_classes)
        self.class_names_ = class_names
        self.train_log_ = result.log
        self.final_lr_ = result.final_lr
        self.input_size_ = size
        return self

    def predict(self, X) -> list:
        """Per-image lists of Detection, highest score first."""
        check_is_fitted(self, "net_")
        images = check_images(X)
        return [
            predict(
                self.net_,
                img,
                score_threshold=self.score_threshold,
                nms_threshold=self.nms_threshold,
            )
            for img in images
        ]

    def score(self, X, y) -> float:
        """Mean average precision at IoU 0.5 over the given data."""
        check_is_fitted(self, "net_")
        images = check_images(X)
        targets = check_detection_targets(y, len(images))
        dataset = self._dataset_from(images, targets, self.class_names_)
        return evaluate_dataset(self.predict(images), dataset, iou_threshold=0.5).mean_ap
