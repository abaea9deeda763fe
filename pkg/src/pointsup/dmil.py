"""
Dynamic multiple instance learning (DMIL).

Bags are built by neighbor sampling around a seed box (a coarse pseudo box or
a masked region), extended by sampling again around every proposal, refined
by a regressor, scored by a two-branch classifier and finally fused into one
pseudo box.

Shapes used throughout: a bag is ``(U1, d)``, an extended bag is
``(U1, U2, d)`` and logits for it are ``(U1, U2, C)``; any number of leading
axes (e.g. one per annotated point) is allowed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .errors import ParameterError
from .geometry import as_array, decode_deltas, normalize_angle, pairwise_iou_h, box_hull
from .losses import FOCAL_ALPHA, FOCAL_GAMMA, focal_terms, jittering_iou_loss_batch, sigmoid


@dataclass(frozen=True)
class JitterGrid:
    """Scale factors and per-axis offsets (fractions of the seed's w and h).

    Proposals are enumerated as ``for s in scales: for dx in offsets: for dy
    in offsets``, so a bag holds ``len(scales) * len(offsets)**2`` boxes.
    """

    scales: Tuple[float, ...] = (1.0,)
    offsets: Tuple[float, ...] = (0.0,)

    @property
    def size(self) -> int:
        return len(self.scales) * len(self.offsets) ** 2

    def table(self) -> np.ndarray:
        """``(size, 3)`` rows of ``(scale, dx, dy)`` in enumeration order."""
        return np.array([(s, dx, dy) for s in self.scales for dx in self.offsets for dy in self.offsets], dtype=float)


CONSTRUCT_GRID = JitterGrid((0.7, 0.85, 1.0, 1.15, 1.3), (-0.25, 0.0, 0.25))
EXTEND_GRID = JitterGrid((0.9, 1.0, 1.1), (-0.1, 0.0, 0.1))


@dataclass
class BagScores:
    s_cls: np.ndarray  # (..., U1, U2, C) sigmoid of class logits
    s_ins: np.ndarray  # (..., U1, U2, C) softmax over U2 of instance logits
    s: np.ndarray  # (..., U1, U2, C) elementwise product
    s_hat: np.ndarray  # (..., U1, C) per-proposal bag score


def construct_bag(seed, grid: JitterGrid = CONSTRUCT_GRID) -> np.ndarray:
    """Neighbor-sampled proposals around ``seed``: ``(..., d) -> (..., U, d)``."""
    seed = as_array(seed)
    table = grid.table()
    out = np.repeat(seed[..., None, :], len(table), axis=-2).copy()
    w = seed[..., None, 2]
    h = seed[..., None, 3]
    out[..., 0] = seed[..., None, 0] + table[:, 1] * w
    out[..., 1] = seed[..., None, 1] + table[:, 2] * h
    out[..., 2] = w * table[:, 0]
    out[..., 3] = h * table[:, 0]
    return out


def extend_bag(bag: np.ndarray, grid: JitterGrid = EXTEND_GRID) -> np.ndarray:
    """Sample around every proposal: ``(..., U1, d) -> (..., U1, U2, d)``."""
    return construct_bag(bag, grid)


def refine_bag(extended: np.ndarray, reg_deltas: np.ndarray) -> np.ndarray:
    """Apply regressor deltas to an extended bag (standard delta decoding)."""
    extended = np.asarray(extended, dtype=float)
    reg_deltas = np.asarray(reg_deltas, dtype=float)
    if reg_deltas.shape != extended.shape:
        raise ParameterError(f"deltas shape {reg_deltas.shape} does not match bag shape {extended.shape}")
    return decode_deltas(extended, reg_deltas)


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def score_bag(cls_logits: np.ndarray, ins_logits: np.ndarray) -> BagScores:
    """Sigmoid class scores times instance scores normalized over U2."""
    s_cls = sigmoid(cls_logits)
    s_ins = _softmax(np.asarray(ins_logits, dtype=float), axis=-2)
    s = s_cls * s_ins
    return BagScores(s_cls, s_ins, s, s.sum(axis=-2))


def dmil_cls_loss(
    cls_logits: np.ndarray,
    ins_logits: np.ndarray,
    targets: np.ndarray,
    neg_cls_logits: np.ndarray,
    alpha: float = FOCAL_ALPHA,
    gamma: float = FOCAL_GAMMA,
):
    """Focal loss on bag scores plus focal loss on negative proposals.

    Args:
        cls_logits, ins_logits: ``(M, U1, U2, C)`` logits of the refined bags.
        targets: ``(M, U1, C)`` one-hot on each bag's annotated class.
        neg_cls_logits: ``(U_neg, C)`` class logits of negatives (target 0).

    Returns:
        ``(value, d_cls, d_ins, d_neg)``: each of the two terms is the
        arithmetic mean over its elements; gradients are w.r.t. the logits.
    """
    scores = score_bag(cls_logits, ins_logits)
    value = 0.0
    d_cls = np.zeros_like(scores.s)
    d_ins = np.zeros_like(scores.s)
    if scores.s_hat.size:
        pos_val, g = focal_terms(scores.s_hat, targets, alpha, gamma)
        g = g / scores.s_hat.size
        value += float(pos_val.mean())
        g = g[..., None, :]
        d_cls = g * scores.s_cls * (1.0 - scores.s_cls) * scores.s_ins
        d_ins = g * scores.s_ins * (scores.s_cls - scores.s_hat[..., None, :])
    neg_cls_logits = np.asarray(neg_cls_logits, dtype=float)
    d_neg = np.zeros_like(neg_cls_logits)
    if neg_cls_logits.size:
        p_neg = sigmoid(neg_cls_logits)
        neg_val, g_neg = focal_terms(p_neg, np.zeros_like(p_neg), alpha, gamma)
        value += float(neg_val.mean())
        d_neg = g_neg * p_neg * (1.0 - p_neg) / p_neg.size
    return value, d_cls, d_ins, d_neg


def select_and_fuse(
    refined: np.ndarray,
    scores: np.ndarray,
    seed,
    class_id: int,
    k: int,
    beta: float,
):
    """Fuse the top-``k`` proposals of one extended bag with its seed box.

    ``refined`` is ``(U1, U2, d)`` (or already ``(U, d)``) and ``scores`` the
    matching ``S`` tensor with a trailing class axis.  The selected scores on
    ``class_id`` are renormalized to sum to one; ties keep the lower index.

    Returns:
        ``beta * seed + (1 - beta) * sum_i w_i * proposal_i`` as an array.
    """
    seed = as_array(seed)
    d = seed.shape[-1]
    boxes = np.asarray(refined, dtype=float).reshape(-1, d)
    s = np.asarray(scores, dtype=float).reshape(len(boxes), -1)[:, class_id]
    if not 1 <= k <= len(boxes):
        raise ParameterError(f"k must lie in [1, {len(boxes)}], got {k}")
    if not 0.0 <= beta <= 1.0:
        raise ParameterError(f"beta must lie in [0, 1], got {beta}")
    order = np.argsort(-s, kind="stable")[:k]
    weights = fusion_weights(s[order])
    fused = beta * seed + (1.0 - beta) * (weights @ boxes[order])
    if d > 4:
        fused[4] = normalize_angle(fused[4])
    return fused


def fusion_weights(scores: np.ndarray) -> np.ndarray:
    """Scores renormalized to sum to one (uniform if they are all zero)."""
    scores = np.asarray(scores, dtype=float)
    total = scores.sum()
    if total <= 0:
        return np.full(scores.shape, 1.0 / len(scores))
    return scores / total


def select_and_fuse_batch(refined, scores, seeds, class_ids: Sequence[int], k: int, beta: float) -> np.ndarray:
    """:func:`select_and_fuse` over a leading bag axis."""
    seeds = np.asarray(seeds, dtype=float)
    out = np.empty_like(seeds)
    for j in range(len(seeds)):
        out[j] = select_and_fuse(refined[j], scores[j], seeds[j], int(class_ids[j]), k, beta)
    return out


def dmil_reg_loss(reg_deltas: np.ndarray, extended: np.ndarray, targets: np.ndarray, r: float = 0.2):
    """Mean Jittering IoU loss of the refined bag against replicated targets.

    Args:
        reg_deltas: ``(..., U1, U2, d)`` regressor output.
        extended: the extended bag the deltas apply to, same shape.
        targets: one box per bag, ``(..., d)``; replicated over ``U1 x U2``.

    Returns:
        ``(value, grad)`` with ``grad`` w.r.t. ``reg_deltas``.
    """
    reg_deltas = np.asarray(reg_deltas, dtype=float)
    extended = np.asarray(extended, dtype=float)
    refined = refine_bag(extended, reg_deltas)
    tgt = np.broadcast_to(np.asarray(targets, dtype=float)[..., None, None, :], refined.shape)
    values, d_box = jittering_iou_loss_batch(refined, tgt, r)
    n = values.size
    if n == 0:
        return 0.0, np.zeros_like(reg_deltas)
    # d box / d delta is diagonal: (w, h, w', h'[, 1])
    jac = np.empty_like(refined)
    jac[..., 0] = extended[..., 2]
    jac[..., 1] = extended[..., 3]
    jac[..., 2] = refined[..., 2]
    jac[..., 3] = refined[..., 3]
    if jac.shape[-1] > 4:
        jac[..., 4] = 1.0
    return float(values.mean()), d_box * jac / n


def sample_negatives(
    seeds: np.ndarray,
    width: int,
    height: int,
    count: int,
    rng: np.random.Generator,
    size_range: Tuple[float, float] = (8.0, 64.0),
    max_iou: float = 0.1,
) -> np.ndarray:
    """Uniform random HBB proposals whose IoU with every seed is below ``max_iou``.

    May return fewer than ``count`` boxes when the scene is crowded.
    """
    seeds = np.asarray(seeds, dtype=float)
    seeds_h = box_hull(seeds).reshape(-1, 4) if seeds.size else np.zeros((0, 4))
    kept = []
    n_kept = 0
    for _ in range(20):
        n = 2 * (count - n_kept) + 8
        w = rng.uniform(size_range[0], size_range[1], n)
        h = rng.uniform(size_range[0], size_range[1], n)
        cx = rng.uniform(w / 2, width - w / 2)
        cy = rng.uniform(h / 2, height - h / 2)
        cand = np.stack([cx, cy, w, h], axis=1)
        if len(seeds_h):
            cand = cand[pairwise_iou_h(cand, seeds_h).max(axis=1) < max_iou]
        cand = cand[: count - n_kept]
        kept.append(cand)
        n_kept += len(cand)
        if n_kept >= count:
            break
    return np.concatenate(kept, axis=0) if kept else np.zeros((0, 4))
