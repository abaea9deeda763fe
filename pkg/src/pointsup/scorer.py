"""
Proposal scoring.

Stands in for the RoI feature extractor and fully connected heads that score
proposals.  Two scorers share one interface (``score(proposals, context)``):

* :class:`OracleScorer` emulates a trained head by reading ground truth:
  the logit for class ``c`` is ``logit(clamp(max IoU with class-c GT))`` plus
  Gaussian noise.
* :class:`LinearScorer` applies an affine map to handcrafted proposal
  features and is trainable by SGD.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ParameterError
from .geometry import box_hull, pairwise_iou
from .scenes import IntegralMaps, Scene

LOGIT_EPS = 1e-4


@dataclass
class ScoreSheet:
    """Class and instance logits for a set of proposals, shape ``(..., C)``."""

    cls_logits: np.ndarray
    ins_logits: np.ndarray

    def __post_init__(self):
        if self.cls_logits.shape != self.ins_logits.shape:
            raise ParameterError("cls and ins logits must have the same shape")


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


def max_iou_by_class(proposals: np.ndarray, gt_boxes: np.ndarray, gt_classes: np.ndarray, n_classes: int) -> np.ndarray:
    """``(..., d)`` proposals -> ``(..., C)`` best IoU against each class's GT (0 if none)."""
    proposals = np.asarray(proposals, dtype=float)
    lead = proposals.shape[:-1]
    flat = proposals.reshape(-1, proposals.shape[-1])
    out = np.zeros((flat.shape[0], n_classes))
    if len(gt_boxes):
        ious = pairwise_iou(flat, gt_boxes)
        for c in range(n_classes):
            sel = gt_classes == c
            if sel.any():
                out[:, c] = ious[:, sel].max(axis=1)
    return out.reshape(lead + (n_classes,))


def oracle_score(
    proposals: np.ndarray,
    scene: Scene,
    noise_sigma: float,
    rng: Optional[np.random.Generator] = None,
    n_classes: Optional[int] = None,
    eps: float = LOGIT_EPS,
) -> ScoreSheet:
    """Ground-truth-aware logits with optional Gaussian noise.

    Args:
        proposals: ``(..., 4|5)`` boxes.
        scene: scene holding the ground truth.
        noise_sigma: standard deviation of the additive logit noise.
        rng: noise source; required when ``noise_sigma > 0``.
        n_classes: number of classes (defaults to ``max class id + 1``).

    Returns:
        ScoreSheet whose cls and ins logits use the same construction with
        independent noise draws.
    """
    if noise_sigma < 0:
        raise ParameterError(f"noise_sigma must be >= 0, got {noise_sigma}")
    classes = scene.class_array()
    if n_classes is None:
        n_classes = int(classes.max()) + 1 if len(classes) else 1
    base = oracle_base_logits(proposals, scene.gt_array(), classes, n_classes, eps)
    return _add_noise(base, noise_sigma, rng)


def oracle_base_logits(proposals, gt_boxes, gt_classes, n_classes, eps=LOGIT_EPS) -> np.ndarray:
    best = max_iou_by_class(proposals, gt_boxes, gt_classes, n_classes)
    return logit(np.clip(best, eps, 1.0 - eps))


def _add_noise(base: np.ndarray, noise_sigma: float, rng) -> ScoreSheet:
    if noise_sigma > 0:
        if rng is None:
            raise ParameterError("an rng is required when noise_sigma > 0")
        return ScoreSheet(base + rng.normal(0.0, noise_sigma, base.shape), base + rng.normal(0.0, noise_sigma, base.shape))
    return ScoreSheet(base.copy(), base.copy())


# ---------------------------------------------------------------------------
# Handcrafted proposal features
# ---------------------------------------------------------------------------


def n_proposal_features(n_classes: int) -> int:
    return 12 + 2 * n_classes


def proposal_features(proposals: np.ndarray, maps: IntegralMaps) -> np.ndarray:
    """Geometric/appearance features for ``(..., 4|5)`` proposals.

    Rotated proposals use their axis-aligned hull.  Columns:

    ====  ===========================================================
    0-1   saliency mean inside the box / in the surrounding ring
    2-3   hole (masked) fraction inside / in the ring
    4-5   saliency imbalance left-right and top-bottom inside the box
    6-7   saliency imbalance of the outer strips, left-right / top-bottom
    8-9   mean saliency of the outer strips, horizontal / vertical pair
    10    log scale, ``log(sqrt(w h) / 16)``
    11    log aspect ratio, ``log(w / h)``
    12+   per-class occupancy inside the box, then in the ring
    ====  ===========================================================
    """
    proposals = np.asarray(proposals, dtype=float)
    hull = box_hull(proposals)
    cx, cy, w, h = (hull[..., k] for k in range(4))
    x1, x2 = cx - w / 2, cx + w / 2
    y1, y2 = cy - h / 2, cy + h / 2
    rects = np.stack(
        [
            np.stack([x1, y1, x2, y2], -1),  # inside
            np.stack([cx - w, cy - h, cx + w, cy + h], -1),  # doubled box
            np.stack([x1, y1, cx, y2], -1),  # left half
            np.stack([cx, y1, x2, y2], -1),  # right half
            np.stack([x1, y1, x2, cy], -1),  # top half
            np.stack([x1, cy, x2, y2], -1),  # bottom half
            np.stack([x1 - w / 2, y1, x1, y2], -1),  # left strip
            np.stack([x2, y1, x2 + w / 2, y2], -1),  # right strip
            np.stack([x1, y1 - h / 2, x2, y1], -1),  # top strip
            np.stack([x1, y2, x2, y2 + h / 2], -1),  # bottom strip
        ],
        axis=-2,
    )
    sums, area = maps.rect_sums(rects[..., 0], rects[..., 1], rects[..., 2], rects[..., 3])
    inside_sum, big_sum = sums[..., 0, :], sums[..., 1, :]
    ring_area = np.maximum(area[..., 1] - area[..., 0], 1.0)[..., None]
    means = sums / np.maximum(area, 1.0)[..., None]
    inside = means[..., 0, :]
    ring = (big_sum - inside_sum) / ring_area
    sal = means[..., 0]
    n_classes = maps.n_maps - 2
    feats = np.empty(proposals.shape[:-1] + (n_proposal_features(n_classes),))
    feats[..., 0] = inside[..., 0]
    feats[..., 1] = ring[..., 0]
    feats[..., 2] = inside[..., 1]
    feats[..., 3] = ring[..., 1]
    feats[..., 4] = sal[..., 2] - sal[..., 3]
    feats[..., 5] = sal[..., 4] - sal[..., 5]
    feats[..., 6] = sal[..., 6] - sal[..., 7]
    feats[..., 7] = sal[..., 8] - sal[..., 9]
    feats[..., 8] = 0.5 * (sal[..., 6] + sal[..., 7])
    feats[..., 9] = 0.5 * (sal[..., 8] + sal[..., 9])
    feats[..., 10] = np.log(np.sqrt(w * h) / 16.0)
    feats[..., 11] = np.log(w / h)
    feats[..., 12 : 12 + n_classes] = inside[..., 2:]
    feats[..., 12 + n_classes :] = ring[..., 2:]
    return feats


# ---------------------------------------------------------------------------
# Linear scorer
# ---------------------------------------------------------------------------


@dataclass
class LinearScorerParams:
    w_cls: np.ndarray
    b_cls: np.ndarray
    w_ins: np.ndarray
    b_ins: np.ndarray

    @classmethod
    def zeros(cls, n_features: int, n_classes: int) -> "LinearScorerParams":
        return cls(
            np.zeros((n_features, n_classes)),
            np.zeros(n_classes),
            np.zeros((n_features, n_classes)),
            np.zeros(n_classes),
        )

    def as_dict(self) -> dict:
        return {"w_cls": self.w_cls, "b_cls": self.b_cls, "w_ins": self.w_ins, "b_ins": self.b_ins}


def linear_score(params: LinearScorerParams, feats: np.ndarray) -> ScoreSheet:
    """Affine scores ``feats @ W + b`` for both heads."""
    feats = np.asarray(feats, dtype=float)
    if feats.shape[-1] != params.w_cls.shape[0]:
        raise ParameterError(f"feature dimension {feats.shape[-1]} does not match weights {params.w_cls.shape[0]}")
    return ScoreSheet(feats @ params.w_cls + params.b_cls, feats @ params.w_ins + params.b_ins)


def linear_score_grad(feats: np.ndarray, d_cls: np.ndarray, d_ins: np.ndarray) -> LinearScorerParams:
    """Back-propagate logit gradients to the scorer parameters."""
    f = feats.reshape(-1, feats.shape[-1])
    dc = d_cls.reshape(-1, d_cls.shape[-1])
    di = d_ins.reshape(-1, d_ins.shape[-1])
    return LinearScorerParams(f.T @ dc, dc.sum(axis=0), f.T @ di, di.sum(axis=0))


def scorer_sgd_step(params: LinearScorerParams, grad: LinearScorerParams, lr: float) -> LinearScorerParams:
    if lr <= 0:
        raise ParameterError(f"lr must be positive, got {lr}")
    return LinearScorerParams(
        params.w_cls - lr * grad.w_cls,
        params.b_cls - lr * grad.b_cls,
        params.w_ins - lr * grad.w_ins,
        params.b_ins - lr * grad.b_ins,
    )


# ---------------------------------------------------------------------------
# Pluggable scorer objects used by the training loop
# ---------------------------------------------------------------------------


@dataclass
class ScoringContext:
    """What a scorer may look at for one scene."""

    maps: IntegralMaps
    gt_boxes: np.ndarray
    gt_classes: np.ndarray
    rng: Optional[np.random.Generator] = None


class OracleScorer:
    trainable = False

    def __init__(self, n_classes: int, noise_sigma: float = 0.5, eps: float = LOGIT_EPS):
        if noise_sigma < 0:
            raise ParameterError(f"oracle_noise_sigma must be >= 0, got {noise_sigma}")
        self.n_classes = n_classes
        self.noise_sigma = noise_sigma
        self.eps = eps

    def score(self, proposals: np.ndarray, ctx: ScoringContext, params=None) -> ScoreSheet:
        base = oracle_base_logits(proposals, ctx.gt_boxes, ctx.gt_classes, self.n_classes, self.eps)
        return _add_noise(base, self.noise_sigma, ctx.rng)


class LinearScorer:
    """Scores proposals with :func:`linear_score`; parameters live with the detector."""

    trainable = True

    def __init__(self, n_classes: int):
        self.n_classes = n_classes
        self.n_features = n_proposal_features(n_classes)

    def init_params(self) -> LinearScorerParams:
        return LinearScorerParams.zeros(self.n_features, self.n_classes)

    def score(self, proposals: np.ndarray, ctx: ScoringContext, params: LinearScorerParams) -> ScoreSheet:
        return linear_score(params, proposal_features(proposals, ctx.maps))
