"""Independent reference implementations used to cross-check the package.

Everything here is deliberately written from the definitions with plain
Python loops (and exact rational arithmetic where it matters), sharing no
code with the package under test.
"""

from __future__ import annotations

from fractions import Fraction


def ref_iou(a, b) -> float:
    """IoU of two (x0, y0, x1, y1) tuples."""
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def ref_nms(boxes, scores, classes, threshold) -> list[int]:
    """Greedy per-class suppression; returns kept input indices.

    Visits detections in descending score (ties broken by input order) and
    drops any later same-class detection whose IoU with a kept one exceeds
    the threshold. Kept indices come back sorted the same way.
    """
    n = len(boxes)
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    removed = [False] * n
    kept = []
    for pos, i in enumerate(order):
        if removed[i]:
            continue
        kept.append(i)
        for j in order[pos + 1:]:
            if removed[j] or classes[j] != classes[i]:
                continue
            if ref_iou(boxes[i], boxes[j]) > threshold:
                removed[j] = True
    return sorted(kept, key=lambda i: (-scores[i], i))


def _pr_points(scores, tp_flags, num_gt):
    """Exact (recall, precision) after each detection in rank order."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    points = []
    tp = 0
    for rank, i in enumerate(order, start=1):
        tp += 1 if tp_flags[i] else 0
        points.append((Fraction(tp, num_gt), Fraction(tp, rank)))
    return points


def ref_ap_eleven(scores, tp_flags, num_gt) -> float:
    """11-point interpolated AP, evaluated with exact rationals."""
    if num_gt == 0 or len(scores) == 0:
        return 0.0
    points = _pr_points(scores, tp_flags, num_gt)
    total = Fraction(0)
    for k in range(11):
        level = Fraction(k, 10)
        candidates = [p for r, p in points if r >= level]
        total += max(candidates) if candidates else Fraction(0)
    return float(total / 11)


def ref_ap_all(scores, tp_flags, num_gt) -> float:
    """Exact area under the interpolated precision envelope."""
    if num_gt == 0 or len(scores) == 0:
        return 0.0
    points = _pr_points(scores, tp_flags, num_gt)
    area = Fraction(0)
    prev_recall = Fraction(0)
    recalls = sorted({r for r, _ in points})
    for r in recalls:
        best = max(p for rr, p in points if rr >= r)
        area += (r - prev_recall) * best
        prev_recall = r
    return float(area)


def central_difference(f, x: float, h: float = 1e-5) -> float:
    return (f(x + h) - f(x - h)) / (2.0 * h)
