"""Training loop wiring the salience-weighted loss to the detector.

Salience weights and anchor assignments depend only on the frozen extractor,
the statistics, and the fixed dataset, so both are computed once up front.
Each step draws the next batch from a seeded shuffle stream, applies one Adam
update on the batch-mean loss, and logs a per-image loss breakdown. Runs with
identical inputs and seeds produce byte-identical checkpoints.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .anchors import assign_targets, generate_anchors
from .data import Dataset
from .losses import FocalConfig, LossBreakdown, detection_losses
from .model import DetectorConfig, DetectorNet, save_checkpoint
from .salience import (
    TAPS,
    FrozenExtractor,
    SalienceStats,
    check_stats_fresh,
    estimate_salience,
    normalize_salience,
)


@dataclass(frozen=True)
class TrainConfig:
    """Optimization schedule and loss settings.

    The learning rate is divided by 10 every decay_interval steps. With
    sbl_enabled off, every image trains with weight 1 (the unweighted
    baseline); with normalize off, the raw salience score is used as the
    weight instead of its band-mapped value.
    """

    learning_rate: float = 1e-4
    total_steps: int = 2000
    decay_interval: int = 800
    batch_size: int = 2
    seed: int = 0
    sbl_enabled: bool = True
    normalize: bool = True
    tap: str = "C2"
    new_min: float = 0.5
    new_max: float = 1.0
    alpha: float = 0.25
    gamma: float = 2.0
    smooth_l1_beta: float = 1.0
    grad_clip_norm: float = 10.0
    positive_iou: float = 0.5
    negative_iou: float = 0.4
    checkpoint_interval: int = 0  # 0 writes only the final checkpoint

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.total_steps < 1 or self.decay_interval < 1 or self.batch_size < 1:
            raise ValueError("total_steps, decay_interval, and batch_size must be at least 1")
        if self.tap not in TAPS:
            raise ValueError(f"unknown tap {self.tap!r}; valid taps: {TAPS}")
        if not 0.0 <= self.new_min <= self.new_max:
            raise ValueError(f"weight band must satisfy 0 <= new_min <= new_max")
        if self.grad_clip_norm < 0 or self.smooth_l1_beta <= 0:
            raise ValueError("grad_clip_norm must be >= 0 and smooth_l1_beta > 0")
        if self.checkpoint_interval < 0:
            raise ValueError("checkpoint_interval must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    net: DetectorNet
    log: list[dict]
    final_lr: float
    checkpoint_path: str | None


class Trainer:
    """Runs the detection training loop over a fixed in-memory dataset.

    With SBL enabled, per-image weights come from the frozen extractor and
    must be backed by statistics matching this exact corpus and extractor
    (anything else raises StaleStatsError before any training happens).
    """

    def __init__(
        self,
        dataset: Dataset,
        detector_config: DetectorConfig,
        train_config: TrainConfig = TrainConfig(),
        stats: SalienceStats | None = None,
        extractor: FrozenExtractor | None = None,
    ):
        if len(dataset) == 0:
            raise ValueError("cannot train on an empty dataset")
        if detector_config.num_classes < len(dataset.class_names):
            raise ValueError(
                f"detector predicts {detector_config.num_classes} classes but the dataset "
                f"has {len(dataset.class_names)}"
            )
        size = detector_config.input_size
        for img in dataset:
            if img.pixels.shape[:2] != (size, size):
                raise ValueError(
                    f"{img.image_id}: expected {size}x{size} pixels, got {img.pixels.shape[:2]}"
                )
        self.dataset = dataset
        self.detector_config = detector_config
        self.config = train_config
        self.focal_config = FocalConfig(alpha=train_config.alpha, gamma=train_config.gamma)
        self.anchors = generate_anchors(size, size, detector_config.anchor_config)
        self.assignments = [
            assign_targets(
                self.anchors,
                img.boxes,
                img.labels,
                positive_iou=train_config.positive_iou,
                negative_iou=train_config.negative_iou,
            )
            for img in dataset
        ]

        if train_config.sbl_enabled:
            if extractor is None:
                raise ValueError("SBL training requires a frozen extractor")
            if stats is None:
                raise ValueError(
                    "SBL training requires salience statistics computed before training"
                )
            check_stats_fresh(stats, dataset, extractor)
            if train_config.normalize and train_config.tap not in stats.tap_stats:
                raise ValueError(
                    f"statistics carry no tap {train_config.tap!r}; recompute them"
                )
            self.raw_salience = np.array(
                [estimate_salience(img.pixels, extractor, train_config.tap) for img in dataset]
            )
            if train_config.normalize:
                self.weights = np.array(
                    [normalize_salience(raw, stats, train_config.tap) for raw in self.raw_salience]
                )
            else:
                self.weights = self.raw_salience.copy()
        else:
            self.raw_salience = np.zeros(len(dataset))
            self.weights = np.ones(len(dataset))
        self.stats = stats
        self.extractor_fingerprint = extractor.fingerprint if extractor is not None else None

        torch.manual_seed(train_config.seed)
        self.net = DetectorNet(detector_config, seed=train_config.seed)
        self.optimizer = torch.optim.Adam(self.net.parameters(), lr=train_config.learning_rate)
        self.lr = train_config.learning_rate
        self.step_count = 0
        self._rng = np.random.default_rng(train_config.seed)
        self._order: list[int] = []
        self._images = [
            torch.from_numpy(np.array(img.pixels, dtype=np.float32)).permute(2, 0, 1)
            for img in dataset
        ]

    def _next_batch(self) -> list[int]:
        batch = []
        while len(batch) < self.config.batch_size:
            if not self._order:
                self._order = list(self._rng.permutation(len(self.dataset)))
            batch.append(int(self._order.pop(0)))
        return batch

    def train_step(self, indices: list[int]) -> tuple[float, list[LossBreakdown]]:
        """One optimizer update over the given image indices.

        Returns the batch-mean loss and one per-image breakdown. The batch
        loss is the mean over images of
        weight * focal_sum / max(num_pos, 1) + l1_sum / max(num_pos, 1).
        """
        cfg = self.config
        x = torch.stack([self._images[i] for i in indices])
        outputs = self.net(x)
        probs = torch.cat([p for p, _ in outputs], dim=1)
        deltas = torch.cat([d for _, d in outputs], dim=1)
        per_image = []
        breakdowns = []
        for row, idx in enumerate(indices):
            focal_sum, l1_sum, num_pos = detection_losses(
                self.assignments[idx], probs[row], deltas[row], self.focal_config, cfg.smooth_l1_beta
            )
            norm = max(num_pos, 1)
            weight = float(self.weights[idx])
            image_loss = weight * focal_sum / norm + l1_sum / norm
            per_image.append(image_loss)
            breakdowns.append(
                LossBreakdown(
                    raw_salience=float(self.raw_salience[idx]),
                    salience_weight=weight,
                    focal_sum=float(focal_sum.detach()),
                    l1_sum=float(l1_sum.detach()),
                    num_pos=num_pos,
                    total=float(image_loss.detach()),
                )
            )
        batch_loss = torch.stack(per_image).mean()
        self.optimizer.zero_grad()
        batch_loss.backward()
        batch_value = float(batch_loss.detach())
        if cfg.grad_clip_norm > 0:
            torch.nn.utils.clip_grad_norm_(self.net.parameters(), cfg.grad_clip_norm)
        self.optimizer.step()
        self.step_count += 1
        if self.step_count % cfg.decay_interval == 0:
            self.lr /= 10.0
            for group in self.optimizer.param_groups:
                group["lr"] = self.lr
        return batch_value, breakdowns

    def run(self, out_dir: str | None = None, log_every: int = 1) -> TrainResult:
        """Train for the configured number of steps.

        When out_dir is given, a JSONL training log and checkpoints are
        written there (intermediate ones at checkpoint_interval, and always a
        final checkpoint.sblckpt).
        """
        cfg = self.config
        log: list[dict] = []
        log_fh = None
        checkpoint_path = None
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            log_fh = open(os.path.join(out_dir, "training_log.jsonl"), "w")
        try:
            for _ in range(cfg.total_steps):
                lr_before = self.lr
                indices = self._next_batch()
                batch_loss, breakdowns = self.train_step(indices)
                record = {
                    "step": self.step_count,
                    "lr": lr_before,
                    "batch_loss": batch_loss,
                    "images": [
                        {"image_id": self.dataset[i].image_id, **bd.to_dict()}
                        for i, bd in zip(indices, breakdowns)
                    ],
                }
                if self.step_count % log_every == 0 or self.step_count == cfg.total_steps:
                    log.append(record)
                    if log_fh is not None:
                        log_fh.write(json.dumps(record, sort_keys=True) + "\n")
                if (
                    out_dir is not None
                    and cfg.checkpoint_interval > 0
                    and self.step_count % cfg.checkpoint_interval == 0
                    and self.step_count < cfg.total_steps
                ):
                    self._write_checkpoint(
                        os.path.join(out_dir, f"checkpoint_{self.step_count:06d}.sblckpt")
                    )
            if out_dir is not None:
                checkpoint_path = os.path.join(out_dir, "checkpoint.sblckpt")
                self._write_checkpoint(checkpoint_path)
        finally:
            if log_fh is not None:
                log_fh.close()
        return TrainResult(net=self.net, log=log, final_lr=self.lr, checkpoint_path=checkpoint_path)

    def _write_checkpoint(self, path: str) -> None:
        save_checkpoint(
            path,
            self.net,
            self.optimizer,
            step=self.step_count,
            learning_rate=self.lr,
            train_config=self.config.to_dict(),
            stats=self.stats.to_dict() if self.stats is not None else None,
        )
