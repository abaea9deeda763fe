"""
Finite-difference checks for every analytic gradient.

Each suite draws random non-degenerate cases, compares the analytic
gradient with central differences and reports the worst relative error
``||g_analytic - g_numeric|| / max(||g_analytic||, ||g_numeric||)``.
Cases near a kink of a piecewise-smooth loss (coincident box edges, touching
boxes, near-ties in the jitter minimum) are redrawn.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Tuple

import numpy as np

from .dmil import construct_bag, dmil_cls_loss, dmil_reg_loss, extend_bag, JitterGrid
from .losses import focal_terms, iou_loss_batch, jitter_targets, jittering_iou_loss_batch

TOLERANCE = 1e-4


@dataclass
class GradcheckRow:
    name: str
    cases: int
    max_rel_err: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= TOLERANCE


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, step) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    steps = np.broadcast_to(np.asarray(step, dtype=float), x.shape)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        hi = x.copy()
        lo = x.copy()
        hi[idx] += steps[idx]
        lo[idx] -= steps[idx]
        grad[idx] = (f(hi) - f(lo)) / (2 * steps[idx])
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def _edges(box: np.ndarray) -> np.ndarray:
    return np.array([box[0] - box[2] / 2, box[0] + box[2] / 2, box[1] - box[3] / 2, box[1] + box[3] / 2])


def _smooth_pair(pred: np.ndarray, target: np.ndarray, margin: float) -> bool:
    """True when the HBB IoU is smooth in a ``margin`` neighborhood of ``pred``."""
    p, t = _edges(pred), _edges(target)
    for a, b in ((0, 0), (1, 1), (0, 1), (1, 0)):
        if abs(p[a] - t[b]) < margin or abs(p[2 + a] - t[2 + b]) < margin:
            return False
    ix = min(p[1], t[1]) - max(p[0], t[0])
    iy = min(p[3], t[3]) - max(p[2], t[2])
    return ix > margin and iy > margin


def _random_pair(rng: np.random.Generator, margin: float = 1e-2) -> Tuple[np.ndarray, np.ndarray]:
    while True:
        target = np.array([rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(4, 20), rng.uniform(4, 20)])
        pred = target + np.array([rng.normal(0, 2), rng.normal(0, 2), rng.normal(0, 3), rng.normal(0, 3)])
        if pred[2] > 1 and pred[3] > 1 and _smooth_pair(pred, target, margin):
            return pred, target


def check_focal(rng: np.random.Generator, n: int = 100) -> GradcheckRow:
    worst = 0.0
    for _ in range(n):
        p = rng.uniform(0.02, 0.98, size=8)
        target = rng.integers(0, 2, size=8).astype(float)
        _, grad = focal_terms(p, target)
        num = central_difference(lambda x: float(focal_terms(x, target)[0].sum()), p, 1e-6)
        worst = max(worst, relative_error(grad, num))
    return GradcheckRow("focal", n, worst)


def check_iou(rng: np.random.Generator, n: int = 100) -> GradcheckRow:
    worst = 0.0
    for _ in range(n):
        pred, target = _random_pair(rng)
        _, grad = iou_loss_batch(pred, target)
        num = central_difference(lambda x: float(iou_loss_batch(x, target)[0]), pred, 1e-6)
        worst = max(worst, relative_error(grad, num))
    return GradcheckRow("iou_h", n, worst)


def _jitter_smooth(pred: np.ndarray, gt: np.ndarray, r: float, margin: float) -> bool:
    targets = jitter_targets(gt, r)
    if not all(_smooth_pair(pred, t, margin) for t in targets):
        return False
    vals = np.sort(iou_loss_batch(np.broadcast_to(pred, targets.shape), targets)[0])
    return vals[1] - vals[0] > 1e-4


def check_jittering(rng: np.random.Generator, n: int = 100, r: float = 0.2) -> GradcheckRow:
    worst = 0.0
    done = 0
    while done < n:
        pred, gt = _random_pair(rng)
        if not _jitter_smooth(pred, gt, r, 1e-2):
            continue
        _, grad = jittering_iou_loss_batch(pred, gt, r)
        num = central_difference(lambda x: float(jittering_iou_loss_batch(x, gt, r)[0]), pred, 1e-6)
        worst = max(worst, relative_error(grad, num))
        done += 1
    return GradcheckRow("jittering_iou", n, worst)


_SMALL_CONSTRUCT = JitterGrid((0.8, 1.2), (0.0,))
_SMALL_EXTEND = JitterGrid((1.0,), (-0.1, 0.1))


def check_dmil_reg(rng: np.random.Generator, n: int = 100, r: float = 0.2) -> GradcheckRow:
    worst = 0.0
    done = 0
    while done < n:
        _, target = _random_pair(rng)
        seed = target + rng.normal(0, 1.5, size=4) * np.array([1, 1, 1, 1])
        if seed[2] < 2 or seed[3] < 2:
            continue
        ext = extend_bag(construct_bag(seed, _SMALL_CONSTRUCT), _SMALL_EXTEND)
        deltas = rng.normal(0, 0.05, size=ext.shape)
        refined = ext.copy()
        refined[..., 0] += deltas[..., 0] * ext[..., 2]
        refined[..., 1] += deltas[..., 1] * ext[..., 3]
        refined[..., 2] *= np.exp(deltas[..., 2])
        refined[..., 3] *= np.exp(deltas[..., 3])
        if not all(_jitter_smooth(b, target, r, 1e-2) for b in refined.reshape(-1, 4)):
            continue
        _, grad = dmil_reg_loss(deltas, ext, target, r)
        num = central_difference(lambda x: dmil_reg_loss(x, ext, target, r)[0], deltas, 1e-7)
        worst = max(worst, relative_error(grad, num))
        done += 1
    return GradcheckRow("dmil_reg", n, worst)


def check_dmil_cls(rng: np.random.Generator, n: int = 100) -> GradcheckRow:
    worst = 0.0
    for _ in range(n):
        cls = rng.normal(0, 1.5, size=(2, 3, 4, 2))
        ins = rng.normal(0, 1.5, size=(2, 3, 4, 2))
        neg = rng.normal(-1, 1.5, size=(5, 2))
        targets = np.zeros((2, 3, 2))
        targets[0, :, 0] = 1.0
        targets[1, :, 1] = 1.0
        _, d_cls, d_ins, d_neg = dmil_cls_loss(cls, ins, targets, neg)
        analytic = np.concatenate([d_cls.ravel(), d_ins.ravel(), d_neg.ravel()])
        sizes = (cls.size, ins.size)

        def f(x):
            c = x[: sizes[0]].reshape(cls.shape)
            i = x[sizes[0] : sizes[0] + sizes[1]].reshape(ins.shape)
            g = x[sizes[0] + sizes[1] :].reshape(neg.shape)
            return dmil_cls_loss(c, i, targets, g)[0]

        x0 = np.concatenate([cls.ravel(), ins.ravel(), neg.ravel()])
        worst = max(worst, relative_error(analytic, central_difference(f, x0, 1e-6)))
    return GradcheckRow("dmil_cls", n, worst)


SUITES = (check_focal, check_iou, check_jittering, check_dmil_reg, check_dmil_cls)


def run_all(seed: int = 0, n: int = 100) -> List[GradcheckRow]:
    rng = np.random.default_rng(seed)
    return [suite(rng, n) for suite in SUITES]


def format_table(rows: List[GradcheckRow]) -> str:
    lines = [f"{'loss':<16}{'cases':>7}{'max rel err':>14}  result"]
    for row in rows:
        lines.append(f"{row.name:<16}{row.cases:>7}{row.max_rel_err:>14.3e}  {'PASS' if row.passed else 'FAIL'}")
    return "\n".join(lines)
