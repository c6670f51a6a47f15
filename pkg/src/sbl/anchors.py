"""Multi-level anchor grids and IoU-based anchor-to-ground-truth assignment."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import encode_deltas_array, iou_matrix

POSITIVE = 1
NEGATIVE = 0
IGNORE = -1


@dataclass(frozen=True)
class AnchorConfig:
    """Anchor shape grammar shared by all pyramid levels.

    Each level contributes one anchor per (aspect_ratio, scale_multiplier)
    pair at every grid cell. A base size b with multiplier m spans an area of
    (b * m)^2; the aspect ratio r then fixes width/height = r, so
    width = b * m * sqrt(r) and height = b * m / sqrt(r).
    """

    aspect_ratios: tuple[float, ...] = (1.0 / 3.0, 1.0, 3.0)
    scale_multipliers: tuple[float, ...] = (2.0, 2.0 ** 0.5, 0.3)
    base_sizes: tuple[float, ...] = (32.0, 64.0, 128.0, 256.0, 512.0)
    strides: tuple[int, ...] = (8, 16, 32, 64, 128)

    def __post_init__(self):
        if not self.aspect_ratios or not self.scale_multipliers:
            raise ValueError("aspect_ratios and scale_multipliers must be non-empty")
        if len(self.base_sizes) != len(self.strides):
            raise ValueError(
                f"base_sizes and strides must pair up level by level: "
                f"{len(self.base_sizes)} vs {len(self.strides)}"
            )
        if not self.base_sizes:
            raise ValueError("at least one pyramid level is required")
        for name, values in (
            ("aspect_ratios", self.aspect_ratios),
            ("scale_multipliers", self.scale_multipliers),
            ("base_sizes", self.base_sizes),
            ("strides", self.strides),
        ):
            if any(v <= 0 for v in values):
                raise ValueError(f"{name} must be strictly positive, got {values}")

    @property
    def num_levels(self) -> int:
        return len(self.strides)

    @property
    def anchors_per_cell(self) -> int:
        return len(self.aspect_ratios) * len(self.scale_multipliers)

    def cell_shapes(self, level: int) -> np.ndarray:
        """(A, 2) widths and heights of the anchors at one level."""
        b = self.base_sizes[level]
        shapes = []
        for r in self.aspect_ratios:
            for m in self.scale_multipliers:
                side = b * m
                shapes.append((side * math.sqrt(r), side / math.sqrt(r)))
        return np.array(shapes, dtype=np.float64)


@dataclass(frozen=True)
class AnchorSet:
    """Anchor boxes for one image size, grouped by pyramid level.

    levels[i] is an (N_i, 4) corner-format array laid out row-major over the
    grid with the anchors_per_cell shapes innermost. Arrays are marked
    read-only; the concatenation over levels is exposed as .boxes.
    """

    config: AnchorConfig
    image_width: int
    image_height: int
    levels: tuple[np.ndarray, ...]
    grid_shapes: tuple[tuple[int, int], ...]
    boxes: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        for arr in self.levels:
            arr.flags.writeable = False
        merged = (
            np.concatenate(self.levels, axis=0)
            if self.levels
            else np.zeros((0, 4), dtype=np.float64)
        )
        merged.flags.writeable = False
        object.__setattr__(self, "boxes", merged)

    def __len__(self) -> int:
        return self.boxes.shape[0]

    @property
    def level_sizes(self) -> tuple[int, ...]:
        return tuple(arr.shape[0] for arr in self.levels)


def generate_anchors(image_width: int, image_height: int, config: AnchorConfig | None = None) -> AnchorSet:
    """Tile anchor boxes over every pyramid level for the given image size.

    Grid cells per level are ceil(dim / stride); centers sit at
    ((col + 0.5) * stride, (row + 0.5) * stride). Anchors extending past the
    image border are kept as-is.
    """
    if image_width <= 0 or image_height <= 0:
        raise ValueError(f"image dimensions must be positive: {image_width}x{image_height}")
    cfg = config if config is not None else AnchorConfig()
    levels = []
    grid_shapes = []
    for li, stride in enumerate(cfg.strides):
        grid_w = math.ceil(image_width / stride)
        grid_h = math.ceil(image_height / stride)
        shapes = cfg.cell_shapes(li)  # (A, 2)
        cx = (np.arange(grid_w, dtype=np.float64) + 0.5) * stride
        cy = (np.arange(grid_h, dtype=np.float64) + 0.5) * stride
        # Row-major: rows outer, columns inner, per-cell shapes innermost.
        centers_x = np.tile(np.repeat(cx[None, :], grid_h, axis=0).reshape(-1, 1), (1, shapes.shape[0]))
        centers_y = np.tile(np.repeat(cy[:, None], grid_w, axis=1).reshape(-1, 1), (1, shapes.shape[0]))
        half_w = 0.5 * shapes[:, 0][None, :]
        half_h = 0.5 * shapes[:, 1][None, :]
        boxes = np.stack(
            [centers_x - half_w, centers_y - half_h, centers_x + half_w, centers_y + half_h],
            axis=2,
        ).reshape(-1, 4)
        levels.append(boxes)
        grid_shapes.append((grid_h, grid_w))
    return AnchorSet(
        config=cfg,
        image_width=image_width,
        image_height=image_height,
        levels=tuple(levels),
        grid_shapes=tuple(grid_shapes),
    )


@dataclass(frozen=True)
class AssignmentMap:
    """Per-anchor training targets.

    labels holds exactly one of POSITIVE, NEGATIVE, or IGNORE per anchor.
    For positive anchors, class_ids / matched_gt / deltas carry the matched
    ground-truth class, its index, and the encoded regression target; the
    remaining rows are -1 (ids and indices) and 0 (deltas).
    """

    labels: np.ndarray
    class_ids: np.ndarray
    matched_gt: np.ndarray
    deltas: np.ndarray

    def __post_init__(self):
        for arr in (self.labels, self.class_ids, self.matched_gt, self.deltas):
            arr.flags.writeable = False
        if not np.all(np.isin(self.labels, (POSITIVE, NEGATIVE, IGNORE))):
            raise ValueError("labels must be drawn from {POSITIVE, NEGATIVE, IGNORE}")

    @property
    def num_pos(self) -> int:
        return int(np.sum(self.labels == POSITIVE))

    @property
    def positive_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels == POSITIVE)


def assign_targets(
    anchors: AnchorSet | np.ndarray,
    gt_boxes: np.ndarray,
    gt_labels: np.ndarray,
    positive_iou: float = 0.5,
    negative_iou: float = 0.4,
) -> AssignmentMap:
    """Match anchors to ground-truth boxes by IoU.

    Anchors at or above positive_iou to their best ground truth are positive,
    those strictly below negative_iou are negative, the band in between is
    ignored. Afterwards each ground truth with any positive-IoU anchor claims
    its single best anchor (forced match), so no object goes unsupervised;
    forced matches are applied in increasing order of their IoU so that when
    two ground truths share a best anchor, the better-overlapping one wins.

    gt_boxes is (G, 4) corner format, gt_labels is (G,) non-negative ints.
    """
    if not 0.0 <= negative_iou <= positive_iou <= 1.0:
        raise ValueError(
            f"thresholds must satisfy 0 <= negative <= positive <= 1, "
            f"got negative={negative_iou} positive={positive_iou}"
        )
    anchor_boxes = anchors.boxes if isinstance(anchors, AnchorSet) else np.asarray(anchors, dtype=np.float64)
    anchor_boxes = anchor_boxes.reshape(-1, 4)
    n = anchor_boxes.shape[0]
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_labels = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
    if gt_boxes.shape[0] != gt_labels.shape[0]:
        raise ValueError(f"{gt_boxes.shape[0]} boxes vs {gt_labels.shape[0]} labels")
    if np.any(gt_labels < 0):
        raise ValueError("ground-truth labels must be non-negative")

    labels = np.full(n, NEGATIVE, dtype=np.int64)
    class_ids = np.full(n, -1, dtype=np.int64)
    matched_gt = np.full(n, -1, dtype=np.int64)
    deltas = np.zeros((n, 4), dtype=np.float64)

    if gt_boxes.shape[0] == 0:
        return AssignmentMap(labels, class_ids, matched_gt, deltas)

    overlaps = iou_matrix(anchor_boxes, gt_boxes)  # (N, G)
    best_gt = np.argmax(overlaps, axis=1)
    best_iou = overlaps[np.arange(n), best_gt]

    labels[best_iou >= positive_iou] = POSITIVE
    labels[(best_iou < positive_iou) & (best_iou >= negative_iou)] = IGNORE
    matched_gt[labels == POSITIVE] = best_gt[labels == POSITIVE]

    # Forced matching, weakest overlap first so stronger pairs take precedence.
    gt_best_anchor = np.argmax(overlaps, axis=0)
    gt_best_iou = overlaps[gt_best_anchor, np.arange(gt_boxes.shape[0])]
    for g in np.argsort(gt_best_iou, kind="stable"):
        if gt_best_iou[g] > 0.0:
            labels[gt_best_anchor[g]] = POSITIVE
            matched_gt[gt_best_anchor[g]] = g

    pos = labels == POSITIVE
    class_ids[pos] = gt_labels[matched_gt[pos]]
    deltas[pos] = encode_deltas_array(anchor_boxes[pos], gt_boxes[matched_gt[pos]])
    return AssignmentMap(labels, class_ids, matched_gt, deltas)
