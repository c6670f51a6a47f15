"""Axis-aligned box arithmetic: IoU, greedy NMS, and anchor-relative delta coding.

Boxes live in continuous pixel coordinates and widths are plain differences
(no "+1" pixel convention), so training and evaluation share one geometry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle with x_min <= x_max and y_min <= y_max."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min <= self.x_max and self.y_min <= self.y_max):
            raise ValueError(f"box has negative extent: {self!r}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max], dtype=np.float64)

    @staticmethod
    def from_array(arr) -> "Box":
        x0, y0, x1, y1 = (float(v) for v in arr)
        return Box(x0, y0, x1, y1)


@dataclass(frozen=True)
class Detection:
    """A scored, classified box: the unit of model output and evaluation input."""

    box: Box
    score: float
    class_id: int

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score outside [0, 1]: {self.score}")
        if self.class_id < 0:
            raise ValueError(f"negative class id: {self.class_id}")


@dataclass(frozen=True)
class BoxDelta:
    """Anchor-relative offsets: centers normalized by anchor size, log-scale sizes."""

    tx: float
    ty: float
    tw: float
    th: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.tx, self.ty, self.tw, self.th)):
            raise ValueError(f"non-finite box delta: {self!r}")

    def as_array(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tw, self.th], dtype=np.float64)


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes. Returns 0 when the union is empty."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two (N, 4) and (M, 4) corner-format arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0.0, None) * np.clip(iy, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0.0)
    return out


def nms(detections: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy per-class non-maximum suppression.

    Within each class, detections are visited in descending score order (ties
    keep input order); each kept detection suppresses later same-class
    detections whose IoU with it exceeds the threshold. Boxes of different
    classes never interact. The survivors are returned sorted by descending
    score, ties again in input order.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold outside [0, 1]: {iou_threshold}")
    if not detections:
        return []
    by_class: dict[int, list[int]] = {}
    for idx, det in enumerate(detections):
        by_class.setdefault(det.class_id, []).append(idx)
    kept: list[int] = []
    for indices in by_class.values():
        order = sorted(indices, key=lambda i: (-detections[i].score, i))
        suppressed: set[int] = set()
        for pos, i in enumerate(order):
            if i in suppressed:
                continue
            kept.append(i)
            for j in order[pos + 1:]:
                if j in suppressed:
                    continue
                if iou(detections[i].box, detections[j].box) > iou_threshold:
                    suppressed.add(j)
    kept.sort(key=lambda i: (-detections[i].score, i))
    return [detections[i] for i in kept]


def encode_deltas(anchor: Box, target: Box) -> BoxDelta:
    """Express a target box as offsets from an anchor.

    tx, ty are the center shift normalized by anchor width/height; tw, th are
    log size ratios. Raises on anchors or targets with zero width or height,
    since those cannot be encoded.
    """
    if anchor.width <= 0.0 or anchor.height <= 0.0:
        raise ValueError(f"anchor with empty extent cannot encode: {anchor!r}")
    if target.width <= 0.0 or target.height <= 0.0:
        raise ValueError(f"target with empty extent cannot be log-encoded: {target!r}")
    acx, acy = anchor.center
    tcx, tcy = target.center
    return BoxDelta(
        tx=(tcx - acx) / anchor.width,
        ty=(tcy - acy) / anchor.height,
        tw=math.log(target.width / anchor.width),
        th=math.log(target.height / anchor.height),
    )


def decode_deltas(anchor: Box, delta: BoxDelta, image_size: tuple[float, float] | None = None) -> Box:
    """Invert encode_deltas. With image_size=(width, height), clips to the image."""
    if anchor.width <= 0.0 or anchor.height <= 0.0:
        raise ValueError(f"anchor with empty extent cannot decode: {anchor!r}")
    acx, acy = anchor.center
    cx = acx + delta.tx * anchor.width
    cy = acy + delta.ty * anchor.height
    w = anchor.width * math.exp(delta.tw)
    h = anchor.height * math.exp(delta.th)
    x0, x1 = cx - 0.5 * w, cx + 0.5 * w
    y0, y1 = cy - 0.5 * h, cy + 0.5 * h
    if image_size is not None:
        iw, ih = image_size
        x0, x1 = min(max(x0, 0.0), iw), min(max(x1, 0.0), iw)
        y0, y1 = min(max(y0, 0.0), ih), min(max(y1, 0.0), ih)
    return Box(x0, y0, x1, y1)


def encode_deltas_array(anchors: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Vectorized encode_deltas over matched (N, 4) anchor/target arrays."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
    if anchors.shape != targets.shape:
        raise ValueError(f"anchor/target shape mismatch: {anchors.shape} vs {targets.shape}")
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    tw_ = targets[:, 2] - targets[:, 0]
    th_ = targets[:, 3] - targets[:, 1]
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("anchor with empty extent cannot encode")
    if np.any(tw_ <= 0) or np.any(th_ <= 0):
        raise ValueError("target with empty extent cannot be log-encoded")
    acx = anchors[:, 0] + 0.5 * aw
    acy = anchors[:, 1] + 0.5 * ah
    tcx = targets[:, 0] + 0.5 * tw_
    tcy = targets[:, 1] + 0.5 * th_
    return np.stack(
        [(tcx - acx) / aw, (tcy - acy) / ah, np.log(tw_ / aw), np.log(th_ / ah)], axis=1
    )


def decode_deltas_array(
    anchors: np.ndarray, deltas: np.ndarray, image_size: tuple[float, float] | None = None
) -> np.ndarray:
    """Vectorized decode_deltas; deltas must be finite."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    if anchors.shape != deltas.shape:
        raise ValueError(f"anchor/delta shape mismatch: {anchors.shape} vs {deltas.shape}")
    if not np.all(np.isfinite(deltas)):
        raise ValueError("non-finite box delta")
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + 0.5 * aw
    acy = anchors[:, 1] + 0.5 * ah
    cx = acx + deltas[:, 0] * aw
    cy = acy + deltas[:, 1] * ah
    w = aw * np.exp(deltas[:, 2])
    h = ah * np.exp(deltas[:, 3])
    boxes = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
    if image_size is not None:
        iw, ih = image_size
        boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0.0, iw)
        boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0.0, ih)
    return boxes
