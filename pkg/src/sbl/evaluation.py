"""Detection quality metrics: interpolated average precision and corpus reports.

Matching is greedy in score order: each detection claims the highest-IoU
not-yet-matched ground truth of its class at or above the IoU threshold;
everything else is a false positive, except detections whose only qualifying
overlap is a difficult-flagged ground truth, which are excluded from scoring
entirely (as are difficult ground truths themselves).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .geometry import Detection, iou_matrix


def precision_recall_f1(num_tp: int, num_fp: int, num_gt: int) -> tuple[float, float, float]:
    """Precision, recall, and F1 from match counts; empty denominators give 0."""
    precision = num_tp / (num_tp + num_fp) if (num_tp + num_fp) > 0 else 0.0
    recall = num_tp / num_gt if num_gt > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if (precision + recall) > 0 else 0.0
    return precision, recall, f1


def average_precision(
    scores: np.ndarray, tp_flags: np.ndarray, num_gt: int, eleven_point: bool = True
) -> float:
    """AP from per-detection scores and true-positive flags.

    The default is the 11-point interpolation: the mean over recall levels
    {0, 0.1, ..., 1.0} of the maximum precision at recall >= that level.
    With eleven_point=False, the exact area under the interpolated
    precision envelope is integrated instead. No ground truth means AP 0.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    tp_flags = np.asarray(tp_flags, dtype=bool).reshape(-1)
    if scores.shape != tp_flags.shape:
        raise ValueError(f"{scores.shape[0]} scores vs {tp_flags.shape[0]} flags")
    if num_gt < 0:
        raise ValueError(f"num_gt must be non-negative, got {num_gt}")
    if num_gt == 0 or scores.size == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = tp_flags[order].astype(np.float64)
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / num_gt
    precision = cum_tp / (cum_tp + cum_fp)
    if eleven_point:
        total = 0.0
        for level in np.linspace(0.0, 1.0, 11):
            mask = recall >= level - 1e-12
            total += float(precision[mask].max()) if np.any(mask) else 0.0
        return total / 11.0
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


@dataclass
class ClassEval:
    """Per-class match outcome and its precision/recall curve."""

    class_name: str
    ap: float
    num_gt: int
    num_tp: int
    num_fp: int
    num_ignored: int
    scores: list = field(default_factory=list)
    precisions: list = field(default_factory=list)
    recalls: list = field(default_factory=list)


@dataclass
class EvalResult:
    """Corpus-level detection metrics at one IoU threshold.

    mean_ap averages AP over classes with at least one non-difficult ground
    truth; classes without any are excluded and noted in flags. Precision,
    recall, and F1 describe the supplied detections as the operating point.
    """

    iou_threshold: float
    eleven_point: bool
    num_images: int
    num_ground_truths: int
    num_detections: int
    per_class: dict
    mean_ap: float
    precision: float
    recall: float
    f1: float
    flags: tuple

    def to_dict(self) -> dict:
        return {
            "iou_threshold": self.iou_threshold,
            "eleven_point": self.eleven_point,
            "num_images": self.num_images,
            "num_ground_truths": self.num_ground_truths,
            "num_detections": self.num_detections,
            "mean_ap": self.mean_ap,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "flags": list(self.flags),
            "per_class": {
                name: {
                    "ap": ce.ap,
                    "num_gt": ce.num_gt,
                    "num_tp": ce.num_tp,
                    "num_fp": ce.num_fp,
                    "num_ignored": ce.num_ignored,
                    "scores": ce.scores,
                    "precisions": ce.precisions,
                    "recalls": ce.recalls,
                }
                for name, ce in self.per_class.items()
            },
        }

    def to_text(self) -> str:
        lines = [
            f"images: {self.num_images}   ground truths: {self.num_ground_truths}   "
            f"detections: {self.num_detections}",
            f"IoU threshold: {self.iou_threshold}   "
            f"AP method: {'11-point' if self.eleven_point else 'all-point'}",
            "",
            f"{'class':<20} {'AP':>8} {'gt':>6} {'tp':>6} {'fp':>6}",
        ]
        for name, ce in self.per_class.items():
            lines.append(f"{name:<20} {ce.ap:>8.4f} {ce.num_gt:>6} {ce.num_tp:>6} {ce.num_fp:>6}")
        lines.append("")
        lines.append(f"{'mAP':<20} {self.mean_ap:>8.4f}")
        lines.append(
            f"precision {self.precision:.4f}   recall {self.recall:.4f}   f1 {self.f1:.4f}"
        )
        for flag in self.flags:
            lines.append(f"note: {flag}")
        return "\n".join(lines)


def _match_class(
    detections: list[tuple[int, int, Detection]],
    gt_by_image: dict[int, tuple[np.ndarray, np.ndarray]],
    iou_threshold: float,
) -> tuple[np.ndarray, np.ndarray, int, int]:
    """Greedy matching for one class over the whole corpus.

    detections are (image_index, original_index, detection) tuples; gt_by_image
    maps image index to (boxes, difficult). Returns kept scores, tp flags, the
    non-difficult ground-truth count, and how many detections were ignored for
    overlapping only difficult ground truths.
    """
    order = sorted(range(len(detections)), key=lambda i: (-detections[i][2].score, detections[i][0], detections[i][1]))
    matched: dict[int, np.ndarray] = {}
    scores, flags = [], []
    ignored = 0
    for i in order:
        img_idx, _, det = detections[i]
        boxes, difficult = gt_by_image.get(img_idx, (np.zeros((0, 4)), np.zeros(0, dtype=bool)))
        if img_idx not in matched:
            matched[img_idx] = np.zeros(boxes.shape[0], dtype=bool)
        used = matched[img_idx]
        if boxes.shape[0]:
            overlaps = iou_matrix(det.box.as_array()[None, :], boxes)[0]
        else:
            overlaps = np.zeros(0)
        candidates = np.flatnonzero((overlaps >= iou_threshold) & ~difficult & ~used)
        if candidates.size:
            best = candidates[np.argmax(overlaps[candidates])]
            used[best] = True
            scores.append(det.score)
            flags.append(True)
            continue
        if np.any((overlaps >= iou_threshold) & difficult):
            ignored += 1  # counts neither for nor against
            continue
        scores.append(det.score)
        flags.append(False)
    num_gt = sum(int(np.sum(~diff)) for _, diff in gt_by_image.values())
    return np.asarray(scores), np.asarray(flags, dtype=bool), num_gt, ignored


def evaluate_dataset(
    predictions: list[list[Detection]],
    dataset: Dataset,
    iou_threshold: float = 0.5,
    eleven_point: bool = True,
) -> EvalResult:
    """Score per-image detection lists against a dataset's annotations."""
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1], got {iou_threshold}")
    if len(predictions) != len(dataset):
        raise ValueError(f"{len(predictions)} prediction lists for {len(dataset)} images")
    num_classes = len(dataset.class_names)
    per_class: dict[str, ClassEval] = {}
    flags: list[str] = []
    total_tp = total_fp = total_gt = total_dets = 0
    ap_values = []
    for cls in range(num_classes):
        name = dataset.class_names[cls]
        dets = [
            (img_idx, det_idx, det)
            for img_idx, dets_i in enumerate(predictions)
            for det_idx, det in enumerate(dets_i)
            if det.class_id == cls
        ]
        gt_by_image = {}
        for img_idx, img in enumerate(dataset):
            sel = img.labels == cls
            if np.any(sel):
                gt_by_image[img_idx] = (img.boxes[sel], img.difficult[sel])
        scores, tp_flags, num_gt, ignored = _match_class(dets, gt_by_image, iou_threshold)
        ap = average_precision(scores, tp_flags, num_gt, eleven_point)
        ce = ClassEval(
            class_name=name,
            ap=ap,
            num_gt=num_gt,
            num_tp=int(tp_flags.sum()),
            num_fp=int((~tp_flags).sum()) if tp_flags.size else 0,
            num_ignored=ignored,
        )
        if scores.size:
            order = np.argsort(-scores, kind="stable")
            tp = tp_flags[order].astype(np.float64)
            cum_tp = np.cumsum(tp)
            cum_fp = np.cumsum(1.0 - tp)
            ce.scores = [float(s) for s in scores[order]]
            ce.precisions = [float(v) for v in cum_tp / (cum_tp + cum_fp)]
            ce.recalls = [float(v) for v in (cum_tp / num_gt if num_gt else np.zeros_like(cum_tp))]
        per_class[name] = ce
        total_tp += ce.num_tp
        total_fp += ce.num_fp
        total_gt += num_gt
        total_dets += len(dets)
        if num_gt > 0:
            ap_values.append(ap)
        elif not dets:
            flags.append(f"class {name!r}: no ground truth and no detections; excluded from mAP")
        else:
            flags.append(f"class {name!r}: detections but no ground truth; excluded from mAP")
    precision, recall, f1 = precision_recall_f1(total_tp, total_fp, total_gt)
    return EvalResult(
        iou_threshold=iou_threshold,
        eleven_point=eleven_point,
        num_images=len(dataset),
        num_ground_truths=total_gt,
        num_detections=total_dets,
        per_class=per_class,
        mean_ap=float(np.mean(ap_values)) if ap_values else 0.0,
        precision=precision,
        recall=recall,
        f1=f1,
        flags=tuple(flags),
    )
