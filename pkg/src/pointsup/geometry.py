"""
Box geometry
============

Horizontal boxes are stored as ``(cx, cy, w, h)`` and oriented boxes as
``(cx, cy, w, h, theta)`` with ``theta`` in radians, normalized to
``[-pi/2, pi/2)``.  The scalar helpers take :class:`HBox` / :class:`OBox`
values; the array helpers take ``(..., 4)`` or ``(..., 5)`` float arrays and
are what the training loop uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

_HALF_PI = math.pi / 2


def normalize_angle(theta):
    """Map an angle (scalar or array) into ``[-pi/2, pi/2)``.

    A rectangle rotated by ``pi`` is the same rectangle, so this only picks a
    canonical representative.
    """
    return (np.asarray(theta, dtype=float) + _HALF_PI) % math.pi - _HALF_PI


def _check_finite(name, *values):
    if not all(math.isfinite(v) for v in values):
        raise ValueError(f"{name}: all fields must be finite, got {values}")


@dataclass(frozen=True)
class Point2D:
    x: float
    y: float

    def __post_init__(self):
        _check_finite("Point2D", self.x, self.y)

    def to_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=float)


@dataclass(frozen=True)
class HBox:
    """Axis-aligned box given by its center and size (pixels)."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        _check_finite("HBox", self.cx, self.cy, self.w, self.h)
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"HBox needs w > 0 and h > 0, got w={self.w}, h={self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h

    def to_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=float)

    def translate(self, dx: float, dy: float) -> "HBox":
        return HBox(self.cx + dx, self.cy + dy, self.w, self.h)


@dataclass(frozen=True)
class OBox:
    """Rotated box; ``theta`` is normalized on construction."""

    cx: float
    cy: float
    w: float
    h: float
    theta: float = 0.0

    def __post_init__(self):
        _check_finite("OBox", self.cx, self.cy, self.w, self.h, self.theta)
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"OBox needs w > 0 and h > 0, got w={self.w}, h={self.h}")
        object.__setattr__(self, "theta", float(normalize_angle(self.theta)))

    @property
    def area(self) -> float:
        return self.w * self.h

    def to_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h, self.theta], dtype=float)

    def translate(self, dx: float, dy: float) -> "OBox":
        return OBox(self.cx + dx, self.cy + dy, self.w, self.h, self.theta)


Box = Union[HBox, OBox]


def box_from_array(values) -> Box:
    """Build an :class:`HBox` (4 values) or :class:`OBox` (5 values)."""
    values = [float(v) for v in np.asarray(values, dtype=float).ravel()]
    if len(values) == 4:
        return HBox(*values)
    if len(values) == 5:
        return OBox(*values)
    raise ValueError(f"expected 4 or 5 box parameters, got {len(values)}")


def as_array(box) -> np.ndarray:
    if isinstance(box, (HBox, OBox)):
        return box.to_array()
    return np.asarray(box, dtype=float)


# ---------------------------------------------------------------------------
# Horizontal boxes (vectorized)
# ---------------------------------------------------------------------------


def cxcywh_to_xyxy(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=float)
    half = boxes[..., 2:4] / 2
    return np.concatenate([boxes[..., 0:2] - half, boxes[..., 0:2] + half], axis=-1)


def xyxy_to_cxcywh(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=float)
    wh = boxes[..., 2:4] - boxes[..., 0:2]
    return np.concatenate([boxes[..., 0:2] + wh / 2, wh], axis=-1)


def iou_h_arrays(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise IoU of broadcastable ``(..., 4)`` arrays of HBB."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ix = np.minimum(a[..., 0] + a[..., 2] / 2, b[..., 0] + b[..., 2] / 2) - np.maximum(
        a[..., 0] - a[..., 2] / 2, b[..., 0] - b[..., 2] / 2
    )
    iy = np.minimum(a[..., 1] + a[..., 3] / 2, b[..., 1] + b[..., 3] / 2) - np.maximum(
        a[..., 1] - a[..., 3] / 2, b[..., 1] - b[..., 3] / 2
    )
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    return np.clip(inter / union, 0.0, 1.0)


def pairwise_iou_h(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``(N, 4) x (M, 4) -> (N, M)`` IoU matrix."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    return iou_h_arrays(a[:, None, :], b[None, :, :])


def iou_h(a: HBox, b: HBox) -> float:
    """IoU of two horizontal boxes."""
    return float(iou_h_arrays(as_array(a), as_array(b)))


# ---------------------------------------------------------------------------
# Oriented boxes
# ---------------------------------------------------------------------------


def obox_corners(box) -> np.ndarray:
    """Corners of a (possibly rotated) box in counter-clockwise order.

    Accepts 4 or 5 parameters; a missing angle means 0.  Returns ``(4, 2)``.
    """
    p = as_array(box)
    cx, cy, w, h = p[:4]
    theta = p[4] if p.shape[0] > 4 else 0.0
    c, s = math.cos(theta), math.sin(theta)
    local = np.array([[-w / 2, -h / 2], [w / 2, -h / 2], [w / 2, h / 2], [-w / 2, h / 2]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([cx, cy])


def polygon_area(poly: np.ndarray) -> float:
    """Shoelace area (absolute) of a simple polygon given as ``(K, 2)``."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by convex CCW polygon ``clip``.

    Points on a clip edge count as inside.
    """
    output = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inputs, output = output, []
        prev = inputs[-1]
        s_prev = side(prev)
        for cur in inputs:
            s_cur = side(cur)
            if s_cur >= 0:
                if s_prev < 0:
                    t = s_prev / (s_prev - s_cur)
                    output.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                output.append(cur)
            elif s_prev >= 0:
                t = s_prev / (s_prev - s_cur)
                output.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev, s_prev = cur, s_cur
    return np.array(output, dtype=float).reshape(-1, 2)


def intersection_area_o(a, b) -> float:
    return polygon_area(clip_polygon(obox_corners(a), obox_corners(b)))


def iou_o(a, b) -> float:
    """IoU of two oriented boxes by exact polygon clipping.

    Both clip orders are evaluated in a frame centred on the midpoint of the
    two boxes and averaged, which makes the result exactly symmetric.
    """
    pa = _with_angle(as_array(a))
    pb = _with_angle(as_array(b))
    mid = 0.5 * (pa[:2] + pb[:2])
    qa, qb = pa.copy(), pb.copy()
    qa[:2] -= mid
    qb[:2] -= mid
    ca, cb = obox_corners(qa), obox_corners(qb)
    inter = 0.5 * (polygon_area(clip_polygon(ca, cb)) + polygon_area(clip_polygon(cb, ca)))
    union = pa[2] * pa[3] + pb[2] * pb[3] - inter
    if union <= 0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def _with_angle(p: np.ndarray) -> np.ndarray:
    return p if p.shape[0] == 5 else np.append(p, 0.0)


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix for HBB (last dim 4) or OBB (last dim 5) arrays."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape[-1] == 4 and b.shape[-1] == 4:
        return pairwise_iou_h(a, b)
    a = a.reshape(-1, a.shape[-1])
    b = b.reshape(-1, b.shape[-1])
    out = np.zeros((len(a), len(b)))
    for i in range(len(a)):
        for j in range(len(b)):
            out[i, j] = iou_o(a[i], b[j])
    return out


def iou_arrays(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise IoU for same-shaped ``(N, 4)`` or ``(N, 5)`` arrays."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape[-1] == 4:
        return iou_h_arrays(a, b)
    flat_a = a.reshape(-1, a.shape[-1])
    flat_b = np.broadcast_to(b, a.shape).reshape(-1, a.shape[-1])
    return np.array([iou_o(x, y) for x, y in zip(flat_a, flat_b)]).reshape(a.shape[:-1])


def iou(a: Box, b: Box) -> float:
    if isinstance(a, HBox) and isinstance(b, HBox):
        return iou_h(a, b)
    return iou_o(a, b)


# ---------------------------------------------------------------------------
# Points
# ---------------------------------------------------------------------------


def points_in_boxes(points: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """``(P, 2) x (N, 4|5) -> (P, N)`` containment, boundary inclusive."""
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    boxes = np.asarray(boxes, dtype=float)
    boxes = boxes.reshape(-1, boxes.shape[-1])
    dx = points[:, None, 0] - boxes[None, :, 0]
    dy = points[:, None, 1] - boxes[None, :, 1]
    if boxes.shape[1] > 4:
        c = np.cos(boxes[:, 4])[None, :]
        s = np.sin(boxes[:, 4])[None, :]
        dx, dy = c * dx + s * dy, -s * dx + c * dy
    return (np.abs(dx) <= boxes[None, :, 2] / 2) & (np.abs(dy) <= boxes[None, :, 3] / 2)


def contains_point(box: Box, p: Point2D) -> bool:
    """True iff ``p`` lies in the (rotated) rectangle, edges included."""
    pt = p.to_array() if isinstance(p, Point2D) else np.asarray(p, dtype=float)
    return bool(points_in_boxes(pt, as_array(box)[None])[0, 0])


def l1_center_distance(box: Box, p: Point2D) -> float:
    b = as_array(box)
    pt = p.to_array() if isinstance(p, Point2D) else np.asarray(p, dtype=float)
    return float(abs(b[0] - pt[0]) + abs(b[1] - pt[1]))


def l1_distance_matrix(points: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """``(P, 2) x (N, d) -> (P, N)`` L1 distances from points to box centers."""
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    boxes = np.asarray(boxes, dtype=float)
    boxes = boxes.reshape(-1, boxes.shape[-1])
    return np.abs(points[:, None, 0] - boxes[None, :, 0]) + np.abs(points[:, None, 1] - boxes[None, :, 1])


# ---------------------------------------------------------------------------
# Delta coding
# ---------------------------------------------------------------------------


def decode_deltas(boxes: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Apply ``(dx, dy, dw, dh[, dtheta])`` deltas to reference boxes.

    ``cx' = cx + dx*w``, ``cy' = cy + dy*h``, ``w' = w*exp(dw)``,
    ``h' = h*exp(dh)`` and ``theta' = theta + dtheta``.
    """
    boxes = np.asarray(boxes, dtype=float)
    deltas = np.asarray(deltas, dtype=float)
    if not np.all(np.isfinite(deltas)):
        raise ValueError("deltas must be finite")
    out = np.empty(np.broadcast_shapes(boxes.shape, deltas.shape))
    out[..., 0] = boxes[..., 0] + deltas[..., 0] * boxes[..., 2]
    out[..., 1] = boxes[..., 1] + deltas[..., 1] * boxes[..., 3]
    out[..., 2] = boxes[..., 2] * np.exp(deltas[..., 2])
    out[..., 3] = boxes[..., 3] * np.exp(deltas[..., 3])
    if out.shape[-1] > 4:
        out[..., 4] = normalize_angle(boxes[..., 4] + deltas[..., 4])
    return out


def encode_deltas(boxes: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Inverse of :func:`decode_deltas`."""
    boxes = np.asarray(boxes, dtype=float)
    targets = np.asarray(targets, dtype=float)
    out = np.empty(np.broadcast_shapes(boxes.shape, targets.shape))
    out[..., 0] = (targets[..., 0] - boxes[..., 0]) / boxes[..., 2]
    out[..., 1] = (targets[..., 1] - boxes[..., 1]) / boxes[..., 3]
    out[..., 2] = np.log(targets[..., 2] / boxes[..., 2])
    out[..., 3] = np.log(targets[..., 3] / boxes[..., 3])
    if out.shape[-1] > 4:
        out[..., 4] = normalize_angle(targets[..., 4] - boxes[..., 4])
    return out


def box_hull(boxes: np.ndarray) -> np.ndarray:
    """Axis-aligned hull ``(..., 4)`` of HBB or OBB arrays."""
    boxes = np.asarray(boxes, dtype=float)
    if boxes.shape[-1] == 4:
        return boxes.copy()
    c = np.abs(np.cos(boxes[..., 4]))
    s = np.abs(np.sin(boxes[..., 4]))
    w = boxes[..., 2] * c + boxes[..., 3] * s
    h = boxes[..., 2] * s + boxes[..., 3] * c
    return np.stack([boxes[..., 0], boxes[..., 1], w, h], axis=-1)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thr: float) -> np.ndarray:
    """Greedy non-maximum suppression.

    Boxes are visited by descending score (ties by index); a box is kept
    unless its IoU with an already kept box exceeds ``iou_thr``.

    Returns:
        Indices of the kept boxes in visiting order.
    """
    boxes = np.asarray(boxes, dtype=float)
    scores = np.asarray(scores, dtype=float)
    if len(boxes) == 0:
        return np.zeros(0, dtype=int)
    order = np.lexsort((np.arange(len(scores)), -scores))
    ious = pairwise_iou(boxes[order], boxes[order])
    suppressed = np.zeros(len(order), dtype=bool)
    keep = []
    for i in range(len(order)):
        if suppressed[i]:
            continue
        keep.append(order[i])
        suppressed |= ious[i] > iou_thr
    return np.array(keep, dtype=int)
