"""
Point matching and pseudo-box fusion.

Each annotated point picks teacher predictions in two stages: the ``k1``
predictions nearest to it (L1 distance between centers), then the ``k2`` of
those with the lowest cost ``focal(score on the point's class) + spatial``,
where the spatial term is 0 if the point lies inside the predicted box and 1
otherwise.  The survivors are fused with their scores as weights into a
coarse pseudo box, which DMIL then refines.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List

import numpy as np

from .dmil import fusion_weights, select_and_fuse
from .errors import ParameterError
from .geometry import l1_distance_matrix, normalize_angle, points_in_boxes
from .losses import FOCAL_ALPHA, FOCAL_GAMMA, focal_terms

logger = logging.getLogger(__name__)


@dataclass
class Predictions:
    """Detector outputs: ``boxes (N, d)``, ``scores (N, C)`` in [0, 1], ``origin (N,)`` cell ids."""

    boxes: np.ndarray
    scores: np.ndarray
    origin: np.ndarray

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def labels(self) -> np.ndarray:
        return self.scores.argmax(axis=1)


def cost_matrix(points, point_classes, preds: Predictions, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> np.ndarray:
    """``(P, N)`` matching cost: classification focal cost plus 0/1 spatial cost."""
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    point_classes = np.asarray(point_classes, dtype=int)
    s = preds.scores[:, point_classes].T  # (P, N)
    cls_cost, _ = focal_terms(s, np.ones_like(s), alpha, gamma)
    spatial = 1.0 - points_in_boxes(points, preds.boxes).astype(float)
    return cls_cost + spatial


def match_points(
    points,
    point_classes,
    preds: Predictions,
    k1: int = 5,
    k2: int = 3,
    class_gating: bool = True,
    alpha: float = FOCAL_ALPHA,
    gamma: float = FOCAL_GAMMA,
) -> List[np.ndarray]:
    """Two-stage top-k selection of predictions for every point.

    Stage one keeps the ``k1`` predictions closest to the point; stage two
    keeps the ``k2`` cheapest of those.  Ties fall back to distance, then to
    prediction index.  With ``class_gating`` only predictions whose arg-max
    class equals the point's class are eligible.

    Returns:
        One index array per point (empty when nothing is eligible).
    """
    if k2 > k1:
        raise ParameterError(f"k2 ({k2}) must not exceed k1 ({k1})")
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    point_classes = np.asarray(point_classes, dtype=int)
    if len(preds) == 0:
        return [np.zeros(0, dtype=int) for _ in range(len(points))]
    dist = l1_distance_matrix(points, preds.boxes)
    cost = cost_matrix(points, point_classes, preds, alpha, gamma)
    labels = preds.labels
    index = np.arange(len(preds))
    out = []
    for j in range(len(points)):
        eligible = index[labels == point_classes[j]] if class_gating else index
        if len(eligible) == 0:
            out.append(np.zeros(0, dtype=int))
            continue
        d = dist[j, eligible]
        stage1 = eligible[np.lexsort((eligible, d))[:k1]]
        c = cost[j, stage1]
        stage2 = stage1[np.lexsort((stage1, dist[j, stage1], c))[:k2]]
        out.append(stage2)
    return out


def fuse_coarse(boxes, scores) -> np.ndarray:
    """Score-weighted parameter-wise mean of candidate boxes."""
    boxes = np.asarray(boxes, dtype=float)
    if len(boxes) == 0:
        raise ParameterError("fuse_coarse needs at least one candidate")
    weights = fusion_weights(scores)
    fused = weights @ boxes
    if boxes.shape[-1] > 4:
        fused[4] = normalize_angle(fused[4])
    return fused


def coarse_pseudo_boxes(points, point_classes, preds: Predictions, k1: int = 5, k2: int = 3, class_gating: bool = True):
    """Match every point and fuse its candidates.

    Returns:
        ``(matched, boxes)``: indices of points that got a pseudo box and the
        ``(len(matched), d)`` coarse boxes.
    """
    point_classes = np.asarray(point_classes, dtype=int)
    matches = match_points(points, point_classes, preds, k1, k2, class_gating)
    matched, boxes = [], []
    for j, cand in enumerate(matches):
        if len(cand) == 0:
            logger.debug("point %d unmatched", j)
            continue
        matched.append(j)
        boxes.append(fuse_coarse(preds.boxes[cand], preds.scores[cand, point_classes[j]]))
    d = preds.boxes.shape[1] if len(preds) else 4
    return np.array(matched, dtype=int), (np.stack(boxes) if boxes else np.zeros((0, d)))


def refine_pseudo(coarse, refined_bag: np.ndarray, bag_scores: np.ndarray, class_id: int, k3: int = 1, beta: float = 0.25) -> np.ndarray:
    """Refined pseudo box: the coarse box fused with the top-``k3`` DMIL proposals.

    ``refined_bag`` and ``bag_scores`` come from a bag built around ``coarse``.
    """
    return select_and_fuse(refined_bag, bag_scores, coarse, class_id, k3, beta)
