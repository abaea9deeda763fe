"""
Loss functions with values and gradients.

Every function returns a :class:`LossValue`.  Batched variants take leading
batch axes and return per-element values together with per-element
gradients; the scalar variants wrap them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import as_array, iou_arrays
from .errors import ParameterError

ALPHA1 = 0.01
ALPHA2 = 0.25
FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
PROB_EPS = 1e-6


@dataclass
class LossValue:
    value: float
    grad: np.ndarray


# ---------------------------------------------------------------------------
# Classification
# ---------------------------------------------------------------------------


def focal_terms(p, target, alpha: Optional[float] = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA, eps: float = PROB_EPS):
    """Elementwise focal loss and its derivative with respect to ``p``.

    ``alpha=None`` disables class weighting (``alpha_t = 1``).  Probabilities
    are clamped to ``[eps, 1 - eps]``; the derivative is zero where the clamp
    is active.
    """
    p = np.asarray(p, dtype=float)
    target = np.asarray(target, dtype=float)
    pc = np.clip(p, eps, 1.0 - eps)
    pos = target > 0.5
    pt = np.where(pos, pc, 1.0 - pc)
    if alpha is None:
        at = np.ones_like(pt)
    else:
        at = np.where(pos, alpha, 1.0 - alpha)
    one_minus = 1.0 - pt
    log_pt = np.log(pt)
    value = -at * one_minus**gamma * log_pt
    if gamma == 0:
        d_pt = -at / pt
    else:
        d_pt = at * (gamma * one_minus ** (gamma - 1) * log_pt - one_minus**gamma / pt)
    grad = np.where(pos, d_pt, -d_pt)
    grad = np.where((p < eps) | (p > 1.0 - eps), 0.0, grad)
    return value, grad


def focal_loss(p, target, alpha: Optional[float] = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA, eps: float = PROB_EPS) -> LossValue:
    """Summed focal loss ``-alpha_t (1 - p_t)^gamma log(p_t)``; gradient is w.r.t. ``p``."""
    value, grad = focal_terms(p, target, alpha, gamma, eps)
    return LossValue(float(np.sum(value)), grad)


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def focal_loss_with_logits(logits, target, alpha: Optional[float] = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA, eps: float = PROB_EPS) -> LossValue:
    """Focal loss on ``sigmoid(logits)``; gradient is w.r.t. the logits."""
    p = sigmoid(logits)
    value, d_p = focal_terms(p, target, alpha, gamma, eps)
    return LossValue(float(np.sum(value)), d_p * p * (1.0 - p))


# ---------------------------------------------------------------------------
# IoU losses
# ---------------------------------------------------------------------------


def _iou_grad_h(pred: np.ndarray, target: np.ndarray):
    """IoU of ``(..., 4)`` HBB pairs and its analytic gradient w.r.t. ``pred``."""
    px1 = pred[..., 0] - pred[..., 2] / 2
    px2 = pred[..., 0] + pred[..., 2] / 2
    py1 = pred[..., 1] - pred[..., 3] / 2
    py2 = pred[..., 1] + pred[..., 3] / 2
    tx1 = target[..., 0] - target[..., 2] / 2
    tx2 = target[..., 0] + target[..., 2] / 2
    ty1 = target[..., 1] - target[..., 3] / 2
    ty2 = target[..., 1] + target[..., 3] / 2

    ix_raw = np.minimum(px2, tx2) - np.maximum(px1, tx1)
    iy_raw = np.minimum(py2, ty2) - np.maximum(py1, ty1)
    ix = np.clip(ix_raw, 0, None)
    iy = np.clip(iy_raw, 0, None)
    on_x = (ix_raw > 0).astype(float)
    on_y = (iy_raw > 0).astype(float)

    right = (px2 < tx2).astype(float)  # pred's right edge bounds the overlap
    left = (px1 > tx1).astype(float)
    bottom = (py2 < ty2).astype(float)
    top = (py1 > ty1).astype(float)

    dix_dcx = on_x * (right - left)
    dix_dw = on_x * 0.5 * (right + left)
    diy_dcy = on_y * (bottom - top)
    diy_dh = on_y * 0.5 * (bottom + top)

    inter = ix * iy
    area_p = pred[..., 2] * pred[..., 3]
    union = area_p + target[..., 2] * target[..., 3] - inter

    d_inter = np.stack([iy * dix_dcx, ix * diy_dcy, iy * dix_dw, ix * diy_dh], axis=-1)
    d_area = np.stack([np.zeros_like(area_p), np.zeros_like(area_p), pred[..., 3], pred[..., 2]], axis=-1)
    u = union[..., None]
    i = inter[..., None]
    d_iou = (d_inter * u - i * (d_area - d_inter)) / u**2
    return inter / union, d_iou


def _iou_grad_fd(pred: np.ndarray, target: np.ndarray, rel_step: float = 1e-4):
    """IoU of OBB pairs with a central finite-difference gradient.

    Position and size steps are ``rel_step * sqrt(w*h)``; the angle step is
    ``rel_step`` radians.
    """
    flat_p = pred.reshape(-1, pred.shape[-1])
    flat_t = np.broadcast_to(target, pred.shape).reshape(-1, pred.shape[-1])
    value = iou_arrays(flat_p, flat_t)
    grad = np.zeros_like(flat_p)
    for n in range(len(flat_p)):
        scale = np.sqrt(flat_p[n, 2] * flat_p[n, 3])
        for k in range(flat_p.shape[1]):
            step = rel_step if k == 4 else rel_step * scale
            hi = flat_p[n].copy()
            lo = flat_p[n].copy()
            hi[k] += step
            lo[k] -= step
            grad[n, k] = (iou_arrays(hi, flat_t[n]) - iou_arrays(lo, flat_t[n])) / (2 * step)
    return value.reshape(pred.shape[:-1]), grad.reshape(pred.shape)


def iou_loss_batch(pred: np.ndarray, target: np.ndarray):
    """Per-pair ``1 - IoU`` and gradient w.r.t. ``pred``.

    HBB gradients are analytic.  With no overlap the loss sits on a plateau
    at 1 and the gradient is zero.
    """
    pred = np.asarray(pred, dtype=float)
    target = np.broadcast_to(np.asarray(target, dtype=float), pred.shape)
    if pred.shape[-1] == 4:
        value, d_iou = _iou_grad_h(pred, target)
    else:
        value, d_iou = _iou_grad_fd(pred, target)
    return 1.0 - value, -d_iou


def iou_loss(pred, target) -> LossValue:
    value, grad = iou_loss_batch(as_array(pred), as_array(target))
    return LossValue(float(value), grad)


def jitter_targets(gt, r: float) -> np.ndarray:
    """The target plus its four ``(w, h)`` shrink/expand combinations.

    Rows are ordered ``gt, (-r, -r), (-r, +r), (+r, -r), (+r, +r)``; centers
    and any angle are left untouched.  Works on ``(..., d)`` arrays and returns
    ``(..., 5, d)``.
    """
    if not 0.0 <= r < 1.0:
        raise ParameterError(f"jitter ratio r must lie in [0, 1), got {r}")
    gt = as_array(gt)
    signs = np.array([[0, 0], [-1, -1], [-1, 1], [1, -1], [1, 1]], dtype=float)
    out = np.repeat(gt[..., None, :], 5, axis=-2).copy()
    out[..., 2] = gt[..., None, 2] * (1.0 + signs[:, 0] * r)
    out[..., 3] = gt[..., None, 3] * (1.0 + signs[:, 1] * r)
    return out


def jittering_iou_loss_batch(pred: np.ndarray, gt: np.ndarray, r: float):
    """Base IoU loss plus the smallest IoU loss over the jittered targets.

    Returns per-pair values and gradients w.r.t. ``pred``.  The minimum picks
    the lowest index among ties.
    """
    pred = np.asarray(pred, dtype=float)
    gt = np.broadcast_to(np.asarray(gt, dtype=float), pred.shape)
    base, base_grad = iou_loss_batch(pred, gt)
    targets = jitter_targets(gt, r)
    jit, jit_grad = iou_loss_batch(np.broadcast_to(pred[..., None, :], targets.shape), targets)
    best = np.argmin(jit, axis=-1)
    min_val = np.take_along_axis(jit, best[..., None], axis=-1)[..., 0]
    min_grad = np.take_along_axis(jit_grad, best[..., None, None], axis=-2)[..., 0, :]
    return base + min_val, base_grad + min_grad


def jittering_iou_loss(pred, gt, r: float = 0.2) -> LossValue:
    value, grad = jittering_iou_loss_batch(as_array(pred), as_array(gt), r)
    return LossValue(float(value), grad)


# ---------------------------------------------------------------------------
# Phase compositions
# ---------------------------------------------------------------------------


def compose_phase1(reg_sa: float, reg_dmil: float, cls_dmil: float, alpha1: float = ALPHA1, alpha2: float = ALPHA2) -> float:
    """Box-generation phase loss: masked-region term plus weighted DMIL terms."""
    return reg_sa + alpha1 * reg_dmil + alpha2 * cls_dmil


def compose_phase2(reg_na: float, reg_dmil: float, cls_dmil: float, alpha1: float = ALPHA1, alpha2: float = ALPHA2) -> float:
    """Label-evolution phase loss; same weighting as phase 1."""
    return reg_na + alpha1 * reg_dmil + alpha2 * cls_dmil


def compose_total(l_cls: float, l_sa: float, l_na: float) -> float:
    return l_cls + l_sa + l_na
