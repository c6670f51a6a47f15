"""Classification and box regression losses, including the salience-weighted form.

The classification term is a focal loss; a per-image salience weight scales it
(and only it) so images with busier backgrounds contribute more gradient. Box
regression stays an unweighted smooth L1. All operators accept Python scalars,
numpy arrays, or torch tensors; non-tensor input is promoted to float64 so the
scalar identities hold to tight tolerances, while tensor input keeps its dtype
and autograd graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .anchors import IGNORE, POSITIVE, AssignmentMap

EPS = 1e-7  # probability clamp applied before any log


@dataclass(frozen=True)
class FocalConfig:
    """Focal loss knobs.

    alpha weights the foreground term (background gets 1 - alpha); a negative
    alpha turns class weighting off entirely, which is the configuration under
    which focal loss with gamma=0 reduces exactly to cross-entropy. gamma is
    the focusing exponent and must be non-negative.
    """

    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError(f"gamma must be non-negative, got {self.gamma}")
        if self.alpha > 1:
            raise ValueError(f"alpha must be <= 1, got {self.alpha}")


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    # np.array (not asarray) so read-only inputs are copied into writable memory.
    return torch.as_tensor(np.array(x, dtype=np.float64))


def _check_probabilities(p: torch.Tensor) -> None:
    if not torch.all((p >= 0) & (p <= 1)):
        raise ValueError("probabilities must lie in [0, 1]")


def _check_binary(y: torch.Tensor) -> None:
    if not torch.all((y == 0) | (y == 1)):
        raise ValueError("targets must be 0 or 1")


def _p_t(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Probability assigned to the true class, clamped away from 0 and 1."""
    return torch.where(y == 1, p, 1.0 - p).clamp(EPS, 1.0 - EPS)


def cross_entropy(p, y) -> torch.Tensor:
    """Binary cross-entropy -log p_t on probabilities, elementwise."""
    p, y = _as_tensor(p), _as_tensor(y)
    _check_probabilities(p)
    _check_binary(y)
    return -torch.log(_p_t(p, y))


def focal_loss(p, y, config: FocalConfig = FocalConfig()) -> torch.Tensor:
    """Focal loss alpha_t * (1 - p_t)^gamma * CE(p, y), elementwise.

    With gamma=0 and weighting disabled (alpha < 0) this is exactly
    cross_entropy.
    """
    p, y = _as_tensor(p), _as_tensor(y)
    _check_probabilities(p)
    _check_binary(y)
    p_t = _p_t(p, y)
    loss = (1.0 - p_t) ** config.gamma * -torch.log(p_t)
    if config.alpha >= 0:
        alpha_t = torch.where(y == 1, _as_tensor(config.alpha), _as_tensor(1.0 - config.alpha))
        loss = alpha_t.to(loss.dtype) * loss
    return loss


def focal_loss_logit_grad(logit, y, config: FocalConfig = FocalConfig()) -> torch.Tensor:
    """Closed-form d(focal_loss)/d(logit) at p = sigmoid(logit).

    With u = p_t and s = +1 for y=1 else -1:
        dL/dz = s * alpha_t * (gamma * u * (1-u)^gamma * log(u) - (1-u)^(gamma+1))
    Valid away from the probability clamp.
    """
    z, y = _as_tensor(logit), _as_tensor(y)
    _check_binary(y)
    p = torch.sigmoid(z)
    u = torch.where(y == 1, p, 1.0 - p)
    s = torch.where(y == 1, _as_tensor(1.0), _as_tensor(-1.0)).to(u.dtype)
    g = config.gamma
    grad = s * (g * u * (1.0 - u) ** g * torch.log(u) - (1.0 - u) ** (g + 1.0))
    if config.alpha >= 0:
        alpha_t = torch.where(y == 1, _as_tensor(config.alpha), _as_tensor(1.0 - config.alpha))
        grad = alpha_t.to(grad.dtype) * grad
    return grad


def smooth_l1(pred, target, beta: float = 1.0) -> torch.Tensor:
    """Smooth L1 over the last axis: quadratic inside beta, linear outside.

    Component losses are summed over the final dimension; scalar inputs are
    treated as a single component.
    """
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    pred, target = _as_tensor(pred), _as_tensor(target)
    if not bool(torch.all(torch.isfinite(pred)) and torch.all(torch.isfinite(target))):
        raise ValueError("smooth_l1 requires finite inputs")
    diff = torch.abs(pred - target)
    per_component = torch.where(diff < beta, 0.5 * diff * diff / beta, diff - 0.5 * beta)
    if per_component.ndim == 0:
        return per_component
    return per_component.sum(dim=-1)


def salience_biased_loss(classification_loss, salience_weight) -> torch.Tensor:
    """Scale a classification loss by a per-image salience weight.

    The weight multiplies the classification term only; callers keep the box
    regression term out of this function. Both inputs must be non-negative.
    """
    loss, w = _as_tensor(classification_loss), _as_tensor(salience_weight)
    if not torch.all(loss >= 0):
        raise ValueError("classification loss must be non-negative")
    if not torch.all(w >= 0):
        raise ValueError("salience weight must be non-negative")
    return w.to(loss.dtype) * loss


@dataclass(frozen=True)
class LossBreakdown:
    """Audit record for one image's training loss.

    total = salience_weight * focal_sum / max(num_pos, 1)
          + l1_sum / max(num_pos, 1)
    """

    raw_salience: float
    salience_weight: float
    focal_sum: float
    l1_sum: float
    num_pos: int
    total: float

    def __post_init__(self):
        values = (self.raw_salience, self.salience_weight, self.focal_sum, self.l1_sum, self.total)
        if not all(np.isfinite(v) and v >= 0 for v in values):
            raise ValueError(f"loss breakdown fields must be finite and non-negative: {self!r}")
        if self.num_pos < 0:
            raise ValueError(f"num_pos must be non-negative, got {self.num_pos}")

    def to_dict(self) -> dict:
        return {
            "raw_salience": self.raw_salience,
            "salience_weight": self.salience_weight,
            "focal_sum": self.focal_sum,
            "l1_sum": self.l1_sum,
            "num_pos": self.num_pos,
            "total": self.total,
        }


def detection_losses(
    assignment: AssignmentMap,
    class_probs: torch.Tensor,
    box_preds: torch.Tensor,
    config: FocalConfig = FocalConfig(),
    beta: float = 1.0,
) -> tuple[torch.Tensor, torch.Tensor, int]:
    """Unnormalized focal and smooth L1 sums for one image.

    class_probs is (N, K) per-anchor one-vs-all class probabilities and
    box_preds is (N, 4) predicted deltas, aligned with the assignment. The
    focal sum runs over all non-ignored anchors and all K classes against
    one-hot targets; the L1 sum runs over positive anchors only. Both are
    returned without the positive-count normalization so callers can keep
    the autograd graph.
    """
    n = assignment.labels.shape[0]
    if class_probs.shape[0] != n or box_preds.shape[0] != n:
        raise ValueError(
            f"assignment covers {n} anchors but predictions have "
            f"{class_probs.shape[0]} and {box_preds.shape[0]} rows"
        )
    num_classes = class_probs.shape[1]
    labels = np.asarray(assignment.labels)
    keep = torch.from_numpy(labels != IGNORE)
    pos = torch.from_numpy(labels == POSITIVE)
    pos_idx = np.flatnonzero(labels == POSITIVE)
    if pos_idx.size and int(assignment.class_ids[pos_idx].max()) >= num_classes:
        raise ValueError(
            f"assignment contains class id {int(assignment.class_ids[pos_idx].max())} "
            f"but the model predicts {num_classes} classes"
        )
    targets = torch.zeros_like(class_probs)
    if pos_idx.size:
        targets[torch.from_numpy(pos_idx), torch.from_numpy(assignment.class_ids[pos_idx])] = 1.0
    focal_sum = focal_loss(class_probs[keep], targets[keep], config).sum()
    if pos_idx.size:
        gt_deltas = torch.from_numpy(assignment.deltas[pos_idx]).to(box_preds.dtype)
        l1_sum = smooth_l1(box_preds[pos], gt_deltas, beta=beta).sum()
    else:
        l1_sum = torch.zeros((), dtype=box_preds.dtype)
    return focal_sum, l1_sum, int(pos_idx.size)


def total_loss(
    assignment: AssignmentMap,
    class_probs: torch.Tensor,
    box_preds: torch.Tensor,
    salience_weight: float,
    config: FocalConfig = FocalConfig(),
    beta: float = 1.0,
    raw_salience: float = 0.0,
) -> LossBreakdown:
    """Full per-image training loss with its audit breakdown.

    The salience weight scales only the normalized focal term; both terms are
    normalized by max(num_pos, 1). raw_salience is carried through for
    logging and does not affect the value.
    """
    if salience_weight < 0:
        raise ValueError(f"salience weight must be non-negative, got {salience_weight}")
    focal_sum, l1_sum, num_pos = detection_losses(assignment, class_probs, box_preds, config, beta)
    norm = max(num_pos, 1)
    weighted = salience_biased_loss(focal_sum / norm, salience_weight)
    total = weighted + l1_sum / norm
    return LossBreakdown(
        raw_salience=float(raw_salience),
        salience_weight=float(salience_weight),
        focal_sum=float(focal_sum.detach()),
        l1_sum=float(l1_sum.detach()),
        num_pos=num_pos,
        total=float(total.detach()),
    )
