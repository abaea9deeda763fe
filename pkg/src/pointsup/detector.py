"""
Grid detector with a feature pyramid, an EMA teacher and the two-phase trainer.

The "backbone" is fixed: every pyramid level (strides 8 to 128) summarizes
the scene signal inside a ``2 * stride`` window around each cell with a few
moments (saliency mass, centroid offset, spread, hole fraction and class
occupancy).  The trainable part is

* four ``D x D`` matrices that aggregate the pyramid top-down onto the
  stride-8 grid ``M``,
* linear classification and box heads on ``M`` (boxes are decoded relative
  to an 8x8 anchor at every cell center),
* the DMIL box regressor, linear on proposal features,
* optionally the parameters of a trainable proposal scorer.

All parameters live in one ``dict`` of arrays so that the teacher (an EMA
copy), SGD momentum buffers and checkpoints handle them uniformly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .config import RunConfig
from .dmil import (
    JitterGrid,
    construct_bag,
    dmil_cls_loss,
    dmil_reg_loss,
    extend_bag,
    refine_bag,
    sample_negatives,
    score_bag,
    select_and_fuse_batch,
)
from .errors import ParameterError
from .geometry import as_array, decode_deltas, encode_deltas, iou_arrays
from .losses import compose_phase1, compose_phase2, focal_loss_with_logits, jittering_iou_loss_batch, sigmoid
from .matching import Predictions, coarse_pseudo_boxes
from .scenes import IntegralMaps, Scene, apply_mask, render_signal, sample_mask_regions
from .scorer import (
    LinearScorer,
    LinearScorerParams,
    OracleScorer,
    ScoringContext,
    linear_score,
    linear_score_grad,
    n_proposal_features,
    proposal_features,
)

logger = logging.getLogger(__name__)

STRIDES = (8, 16, 32, 64, 128)
ANCHOR_SIZE = 8.0
# keeps decoded sizes within [8 e^-4, 8 e^4] pixels
DELTA_CLIP = 4.0
AGG_KEYS = ("agg_p4", "agg_p5", "agg_p6", "agg_p7")
SCORER_KEYS = ("sc_w_cls", "sc_b_cls", "sc_w_ins", "sc_b_ins")

Params = Dict[str, np.ndarray]


# ---------------------------------------------------------------------------
# Fixed pyramid features
# ---------------------------------------------------------------------------


def n_grid_channels(n_classes: int) -> int:
    return 8 + n_classes


def level_shapes(height: int, width: int, n_levels: int = len(STRIDES)) -> List[tuple]:
    """Grid shapes per level; each level halves the previous one, rounding up."""
    shapes = [(math.ceil(height / STRIDES[0]), math.ceil(width / STRIDES[0]))]
    for _ in range(n_levels - 1):
        h, w = shapes[-1]
        shapes.append((math.ceil(h / 2), math.ceil(w / 2)))
    return shapes


@dataclass
class FeatureGrid:
    """Per-level ``(h_l, w_l, D)`` channel grids, finest level first.

    Channels: saliency mean, centroid offset x/y (in strides), their absolute
    values, log spread x/y, hole fraction, then one occupancy mean per class.
    """

    levels: List[np.ndarray]
    strides: Sequence[int] = STRIDES

    @property
    def n_channels(self) -> int:
        return self.levels[0].shape[-1]

    def cell_centers(self) -> np.ndarray:
        """``(K, 2)`` pixel centers of the finest level's cells, row-major."""
        h, w = self.levels[0].shape[:2]
        s = self.strides[0]
        ys, xs = np.meshgrid((np.arange(h) + 0.5) * s, (np.arange(w) + 0.5) * s, indexing="ij")
        return np.stack([xs.ravel(), ys.ravel()], axis=1)


def _moment_table(signal: np.ndarray) -> np.ndarray:
    height, width = signal.shape[:2]
    sal = 1.0 - signal[..., 0]
    hole = 1.0 - signal.sum(axis=-1)
    xs = (np.arange(width) + 0.5)[None, :]
    ys = (np.arange(height) + 0.5)[:, None]
    maps = np.concatenate(
        [
            np.stack([sal, sal * xs, sal * ys, sal * xs**2, sal * ys**2, hole], axis=-1),
            signal[..., 1:],
        ],
        axis=-1,
    )
    table = np.zeros((height + 1, width + 1, maps.shape[-1]))
    table[1:, 1:] = maps.cumsum(axis=0).cumsum(axis=1)
    return table


def build_feature_grid(signal: np.ndarray) -> FeatureGrid:
    """Window moments of a ``(H, W, 1 + C)`` signal at every pyramid level."""
    signal = np.asarray(signal, dtype=float)
    height, width = signal.shape[:2]
    table = _moment_table(signal)
    levels = []
    for (gh, gw), s in zip(level_shapes(height, width), STRIDES):
        cx = (np.arange(gw) + 0.5) * s
        cy = (np.arange(gh) + 0.5) * s
        x1 = np.clip(cx - s, 0, width).astype(np.intp)
        x2 = np.clip(cx + s, 0, width).astype(np.intp)
        y1 = np.clip(cy - s, 0, height).astype(np.intp)
        y2 = np.clip(cy + s, 0, height).astype(np.intp)
        sums = table[np.ix_(y2, x2)] - table[np.ix_(y1, x2)] - table[np.ix_(y2, x1)] + table[np.ix_(y1, x1)]
        area = np.maximum(np.outer(y2 - y1, x2 - x1), 1).astype(float)
        mass = sums[..., 0]
        safe = np.where(mass > 1e-9, mass, 1.0)
        occupied = mass > 1e-9
        mean_x = np.where(occupied, sums[..., 1] / safe, cx[None, :])
        mean_y = np.where(occupied, sums[..., 2] / safe, cy[:, None])
        var_x = np.where(occupied, np.maximum(sums[..., 3] / safe - mean_x**2, 0.0), 0.0)
        var_y = np.where(occupied, np.maximum(sums[..., 4] / safe - mean_y**2, 0.0), 0.0)
        mx = (mean_x - cx[None, :]) / s
        my = (mean_y - cy[:, None]) / s
        feats = np.empty((gh, gw, 8 + signal.shape[-1] - 1))
        feats[..., 0] = mass / area
        feats[..., 1] = mx
        feats[..., 2] = my
        feats[..., 3] = np.abs(mx)
        feats[..., 4] = np.abs(my)
        feats[..., 5] = np.log1p(np.sqrt(var_x)) / 4.0
        feats[..., 6] = np.log1p(np.sqrt(var_y)) / 4.0
        feats[..., 7] = sums[..., 5] / area
        feats[..., 8:] = sums[..., 6:] / area[..., None]
        levels.append(feats)
    return FeatureGrid(levels)


# ---------------------------------------------------------------------------
# Top-down aggregation
# ---------------------------------------------------------------------------


def upsample2(x: np.ndarray, shape) -> np.ndarray:
    """Nearest-neighbor 2x upsampling cropped to ``shape`` (rows, cols)."""
    return np.repeat(np.repeat(x, 2, axis=0), 2, axis=1)[: shape[0], : shape[1]]


def upsample2_adjoint(g: np.ndarray, shape) -> np.ndarray:
    """Adjoint of :func:`upsample2`: zero-pad, then sum 2x2 blocks down to ``shape``."""
    h, w = shape
    padded = np.zeros((2 * h, 2 * w) + g.shape[2:])
    padded[: g.shape[0], : g.shape[1]] = g
    return padded.reshape(h, 2, w, 2, *g.shape[2:]).sum(axis=(1, 3))


def fpn_forward(levels: Sequence[np.ndarray], weights: Sequence[np.ndarray]):
    """Top-down pass; returns ``M`` and every intermediate sum ``A_l``.

    ``A_top = P_top`` and ``A_l = P_l + Up(A_{l+1} @ W_{l+1})``;
    ``weights[i]`` maps level ``i + 1`` onto level ``i``.
    """
    if len(weights) != len(levels) - 1:
        raise ParameterError(f"expected {len(levels) - 1} aggregation matrices, got {len(weights)}")
    sums: List[Optional[np.ndarray]] = [None] * len(levels)
    sums[-1] = levels[-1]
    for i in range(len(levels) - 2, -1, -1):
        w = weights[i]
        if w.shape != (levels[i + 1].shape[-1], levels[i].shape[-1]):
            raise ParameterError(f"aggregation matrix {i} has shape {w.shape}")
        sums[i] = levels[i] + upsample2(sums[i + 1] @ w, levels[i].shape[:2])
    return sums[0], sums


def fpn_aggregate(grid: FeatureGrid, weights: Sequence[np.ndarray]) -> np.ndarray:
    """Aggregate all levels onto the finest grid (see :func:`fpn_forward`)."""
    return fpn_forward(grid.levels, weights)[0]


def fpn_backward(sums: Sequence[np.ndarray], weights: Sequence[np.ndarray], d_m: np.ndarray) -> List[np.ndarray]:
    """Gradients of the aggregation matrices given ``dL/dM``."""
    grads = []
    d_sum = d_m
    for i, w in enumerate(weights):
        src = sums[i + 1]
        g = upsample2_adjoint(d_sum, src.shape[:2])
        grads.append(src.reshape(-1, src.shape[-1]).T @ g.reshape(-1, g.shape[-1]))
        d_sum = g @ w.T
    return grads


# ---------------------------------------------------------------------------
# Parameters and heads
# ---------------------------------------------------------------------------


def init_params(n_classes: int, trainable_scorer: bool = False, prior: float = 0.01) -> Params:
    """Zero weights with the classification bias set to the logit of ``prior``."""
    d = n_grid_channels(n_classes)
    f = n_proposal_features(n_classes)
    params: Params = {k: np.zeros((d, d)) for k in AGG_KEYS}
    params["cls_w"] = np.zeros((d, n_classes))
    params["cls_b"] = np.full(n_classes, math.log(prior / (1.0 - prior)))
    params["reg_w"] = np.zeros((d, 4))
    params["reg_b"] = np.zeros(4)
    params["dmil_w"] = np.zeros((f, 4))
    params["dmil_b"] = np.zeros(4)
    if trainable_scorer:
        sc = LinearScorerParams.zeros(f, n_classes)
        params.update({"sc_" + k: v for k, v in sc.as_dict().items()})
    return params


def scorer_params(params: Params) -> Optional[LinearScorerParams]:
    if "sc_w_cls" not in params:
        return None
    return LinearScorerParams(params["sc_w_cls"], params["sc_b_cls"], params["sc_w_ins"], params["sc_b_ins"])


def copy_params(params: Params) -> Params:
    return {k: v.copy() for k, v in params.items()}


def cell_anchors(grid: FeatureGrid) -> np.ndarray:
    centers = grid.cell_centers()
    return np.concatenate([centers, np.full((len(centers), 2), ANCHOR_SIZE)], axis=1)


def decode_cells(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    clipped = np.array(deltas, dtype=float, copy=True)
    clipped[..., 2:4] = np.clip(clipped[..., 2:4], -DELTA_CLIP, DELTA_CLIP)
    return decode_deltas(anchors, clipped)


def encode_cells(anchors: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    return encode_deltas(anchors, boxes)


@dataclass
class HeadOutput:
    m: np.ndarray  # (h, w, D) aggregated grid
    sums: list  # per-level aggregation sums, for the backward pass
    logits: np.ndarray  # (K, C)
    deltas: np.ndarray  # (K, 4)
    anchors: np.ndarray  # (K, 4)

    @property
    def boxes(self) -> np.ndarray:
        return decode_cells(self.anchors, self.deltas)

    @property
    def scores(self) -> np.ndarray:
        return sigmoid(self.logits)


def forward(params: Params, grid: FeatureGrid, anchors: Optional[np.ndarray] = None) -> HeadOutput:
    m, sums = fpn_forward(grid.levels, [params[k] for k in AGG_KEYS])
    flat = m.reshape(-1, m.shape[-1])
    logits = flat @ params["cls_w"] + params["cls_b"]
    deltas = flat @ params["reg_w"] + params["reg_b"]
    if anchors is None:
        anchors = cell_anchors(grid)
    return HeadOutput(m, sums, logits, deltas, anchors)


def predictions_from_output(out: HeadOutput, threshold: float) -> Predictions:
    scores = out.scores
    keep = np.flatnonzero(scores.max(axis=1) >= threshold)
    return Predictions(decode_cells(out.anchors[keep], out.deltas[keep]), scores[keep], keep)


def predict(params: Params, grid: FeatureGrid, threshold: float = 0.05) -> Predictions:
    """Decoded box and sigmoid class scores of every cell whose best score reaches ``threshold``."""
    return predictions_from_output(forward(params, grid), threshold)


def head_backward(params: Params, out: HeadOutput, d_logits: np.ndarray, d_deltas: np.ndarray) -> Params:
    """Gradients of the heads and aggregation matrices."""
    flat = out.m.reshape(-1, out.m.shape[-1])
    grads: Params = {
        "cls_w": flat.T @ d_logits,
        "cls_b": d_logits.sum(axis=0),
        "reg_w": flat.T @ d_deltas,
        "reg_b": d_deltas.sum(axis=0),
    }
    d_m = (d_logits @ params["cls_w"].T + d_deltas @ params["reg_w"].T).reshape(out.m.shape)
    for key, g in zip(AGG_KEYS, fpn_backward(out.sums, [params[k] for k in AGG_KEYS], d_m)):
        grads[key] = g
    return grads


def dmil_deltas(params: Params, feats: np.ndarray) -> np.ndarray:
    return feats @ params["dmil_w"] + params["dmil_b"]


# ---------------------------------------------------------------------------
# Label assignment and losses on the grid
# ---------------------------------------------------------------------------


def assign_labels(centers, cell_centers: np.ndarray) -> np.ndarray:
    """Greedy one-to-one assignment of box centers to cells (L1 distance).

    Boxes are processed in ascending order of their best distance (ties by
    index); each takes its nearest unclaimed cell (ties by cell index).

    Returns:
        ``(N,)`` cell indices, ``-1`` for boxes left over when cells run out.
    """
    centers = np.asarray(centers, dtype=float).reshape(-1, 2)
    out = np.full(len(centers), -1, dtype=int)
    if len(centers) == 0:
        return out
    dist = np.abs(centers[:, None, :] - cell_centers[None, :, :]).sum(axis=-1)
    order = np.lexsort((np.arange(len(centers)), dist.min(axis=1)))
    taken = np.zeros(len(cell_centers), dtype=bool)
    for j in order:
        d = np.where(taken, np.inf, dist[j])
        k = int(np.argmin(d))
        if not np.isfinite(d[k]):
            logger.info("box %d left unassigned: all %d cells taken", j, len(cell_centers))
            continue
        out[j] = k
        taken[k] = True
    return out


def classification_loss(logits: np.ndarray, pos_cells, pos_classes, alpha: float, gamma: float):
    """Focal loss over every cell and class, normalized by the positive count."""
    target = np.zeros_like(logits)
    pos_cells = np.asarray(pos_cells, dtype=int)
    pos_classes = np.asarray(pos_classes, dtype=int)
    ok = pos_cells >= 0
    target[pos_cells[ok], pos_classes[ok]] = 1.0
    norm = max(int(ok.sum()), 1)
    loss = focal_loss_with_logits(logits, target, alpha, gamma)
    return loss.value / norm, loss.grad / norm


def box_regression_loss(anchors: np.ndarray, deltas: np.ndarray, cells, targets, r: float):
    """Mean Jittering IoU loss of the boxes decoded at ``cells`` against ``targets``.

    Cells equal to ``-1`` are skipped.  Returns the value and ``dL/d deltas``.
    """
    cells = np.asarray(cells, dtype=int)
    d_deltas = np.zeros_like(deltas)
    ok = cells >= 0
    if not ok.any():
        return 0.0, d_deltas
    targets = np.asarray(targets, dtype=float).reshape(len(cells), -1)
    c = cells[ok]
    raw = deltas[c]
    boxes = decode_cells(anchors[c], raw)
    values, d_box = jittering_iou_loss_batch(boxes, targets[ok], r)
    jac = np.concatenate([anchors[c, 2:4], boxes[:, 2:4]], axis=1)
    inside = np.abs(raw[:, 2:4]) < DELTA_CLIP
    jac[:, 2:4] *= inside
    d_deltas[c] = d_box * jac / len(c)
    return float(values.mean()), d_deltas


# ---------------------------------------------------------------------------
# Teacher and optimizer
# ---------------------------------------------------------------------------


def ema_update(teacher: Params, student: Params, mu: float) -> Params:
    """``teacher <- mu * teacher + (1 - mu) * student`` for every parameter."""
    if not 0.0 < mu < 1.0:
        raise ParameterError(f"EMA momentum must lie in (0, 1), got {mu}")
    return {k: mu * teacher[k] + (1.0 - mu) * student[k] for k in teacher}


def sgd_step(params: Params, grads: Params, velocity: Params, lr: float, momentum: float, weight_decay: float):
    """SGD with momentum and L2 weight decay; returns new params and velocity."""
    new_p, new_v = {}, {}
    for k, p in params.items():
        g = grads.get(k)
        g = weight_decay * p if g is None else g + weight_decay * p
        v = momentum * velocity[k] + g
        new_v[k] = v
        new_p[k] = p - lr * v
    return new_p, new_v


def learning_rate(cfg: RunConfig, iteration: int) -> float:
    lr = cfg.lr
    for frac in cfg.lr_decay_points:
        if iteration >= int(frac * cfg.iterations):
            lr *= cfg.lr_decay_factor
    return lr


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class SceneView:
    """What the trainer sees of one training scene.

    The trainer reads the rendered signal and the annotated points.  The
    underlying :class:`Scene` is kept private: only the scorer plug-in (through
    :meth:`scoring_context`) and the diagnostic IoU logging look at it.
    """

    id: str
    width: int
    height: int
    points: np.ndarray  # (P, 2)
    point_classes: np.ndarray  # (P,)
    object_ids: List[Optional[int]]
    _scene: Scene = field(repr=False)

    @classmethod
    def from_scene(cls, scene: Scene, annotations) -> "SceneView":
        pts = np.array([[a.p.x, a.p.y] for a in annotations], dtype=float).reshape(-1, 2)
        return cls(
            scene.id,
            scene.width,
            scene.height,
            pts,
            np.array([a.class_id for a in annotations], dtype=int),
            [a.object_id for a in annotations],
            scene,
        )

    def extent(self) -> Scene:
        """An object-free scene of the same size (for sampling mask regions)."""
        return Scene(self.id, self.width, self.height)

    def signal(self, n_classes: int) -> np.ndarray:
        return render_signal(self._scene, n_classes)

    def scoring_context(self, maps: IntegralMaps, rng) -> ScoringContext:
        return ScoringContext(maps, self._scene.gt_array(), self._scene.class_array(), rng)

    def gt_for_point(self, j: int) -> Optional[np.ndarray]:
        oid = self.object_ids[j]
        if oid is None or not 0 <= oid < len(self._scene.objects):
            return None
        return as_array(self._scene.objects[oid].gt)


@dataclass
class TrainState:
    student: Params
    teacher: Params
    velocity: Params
    iteration: int = 0


@dataclass
class StepStats:
    iteration: int
    phase: int
    loss_total: float
    loss_cls: float
    loss_reg: float
    loss_dmil_reg: float
    loss_dmil_cls: float
    n_points: int = 0
    n_matched: int = 0


def make_scorer(cfg: RunConfig):
    if cfg.scorer == "oracle":
        return OracleScorer(cfg.n_classes, cfg.oracle_noise_sigma)
    return LinearScorer(cfg.n_classes)


def init_state(cfg: RunConfig) -> TrainState:
    student = init_params(cfg.n_classes, trainable_scorer=cfg.scorer == "linear")
    return TrainState(student, copy_params(student), {k: np.zeros_like(v) for k, v in student.items()})


class Trainer:
    """Runs both training phases over a list of :class:`SceneView`.

    Args:
        cfg: run configuration.
        views: training scenes with their point annotations.
        rngs: generators keyed ``"order"``, ``"mask"``, ``"negatives"`` and
            ``"scorer"``.
        log_sink: called with one dict per refined pseudo box in phase 2.
    """

    def __init__(self, cfg: RunConfig, views: Sequence[SceneView], rngs: Dict[str, np.random.Generator], log_sink: Optional[Callable[[dict], None]] = None):
        if cfg.task != "hbb":
            raise ParameterError("config field 'task' = 'obb' violates: gradient training supports 'hbb' only")
        if not views:
            raise ParameterError("no training scenes")
        self.cfg = cfg
        self.views = list(views)
        self.rngs = rngs
        self.log_sink = log_sink
        self.scorer = make_scorer(cfg)
        self.state = init_state(cfg)
        self.stats: List[StepStats] = []
        self.construct_grid = JitterGrid(tuple(cfg.construct_scales), tuple(cfg.construct_offsets))
        self.extend_grid = JitterGrid(tuple(cfg.extend_scales), tuple(cfg.extend_offsets))
        self._grid_cache: Dict[str, FeatureGrid] = {}
        self._maps_cache: Dict[str, IntegralMaps] = {}
        self._anchor_cache: Dict[tuple, np.ndarray] = {}
        self._order: List[int] = []

    # -- helpers ---------------------------------------------------------

    def _anchors(self, grid: FeatureGrid) -> np.ndarray:
        key = grid.levels[0].shape[:2]
        if key not in self._anchor_cache:
            self._anchor_cache[key] = cell_anchors(grid)
        return self._anchor_cache[key]

    def _clean_inputs(self, view: SceneView):
        """Feature grid and integral maps of an unmasked scene, computed once."""
        if view.id not in self._grid_cache:
            signal = view.signal(self.cfg.n_classes)
            self._grid_cache[view.id] = build_feature_grid(signal)
            self._maps_cache[view.id] = IntegralMaps(signal, dtype=np.float32)
        return self._grid_cache[view.id], self._maps_cache[view.id]

    def _next_view(self) -> SceneView:
        if not self._order:
            self._order = list(self.rngs["order"].permutation(len(self.views)))
        return self.views[self._order.pop(0)]

    def round_of(self, iteration: int) -> int:
        return (iteration - self.cfg.phase1_iters) // len(self.views)

    def _bags(self, seeds: np.ndarray):
        return extend_bag(construct_bag(seeds, self.construct_grid), self.extend_grid)

    def _dmil_cls(self, seeds, classes, refined, maps, ctx, view, grads: Params) -> float:
        """DMIL classification loss for a trainable scorer; accumulates its gradients."""
        sp = scorer_params(self.state.student)
        feats = proposal_features(refined, maps)
        sheet = linear_score(sp, feats)
        targets = np.zeros(refined.shape[:-2] + (self.cfg.n_classes,))
        targets[np.arange(len(seeds)), :, np.asarray(classes, dtype=int)] = 1.0
        negs = sample_negatives(seeds, view.width, view.height, self.cfg.n_neg, self.rngs["negatives"])
        neg_feats = proposal_features(negs, maps)
        neg_sheet = linear_score(sp, neg_feats)
        value, d_cls, d_ins, d_neg = dmil_cls_loss(
            sheet.cls_logits, sheet.ins_logits, targets, neg_sheet.cls_logits, self.cfg.focal_alpha, self.cfg.focal_gamma
        )
        a2 = self.cfg.alpha2
        g_pos = linear_score_grad(feats, d_cls, d_ins)
        g_neg = linear_score_grad(neg_feats, d_neg, np.zeros_like(d_neg))
        grads["sc_w_cls"] = a2 * (g_pos.w_cls + g_neg.w_cls)
        grads["sc_b_cls"] = a2 * (g_pos.b_cls + g_neg.b_cls)
        grads["sc_w_ins"] = a2 * g_pos.w_ins
        grads["sc_b_ins"] = a2 * g_pos.b_ins
        return value

    def _dmil_reg(self, feats, ext, targets, grads: Params) -> float:
        deltas = dmil_deltas(self.state.student, feats)
        value, d = dmil_reg_loss(deltas, ext, targets, self.cfg.r)
        a1 = self.cfg.alpha1
        flat_f = feats.reshape(-1, feats.shape[-1])
        flat_d = d.reshape(-1, 4)
        grads["dmil_w"] = a1 * (flat_f.T @ flat_d)
        grads["dmil_b"] = a1 * flat_d.sum(axis=0)
        return value

    def _finish_step(self, grads: Params) -> None:
        cfg = self.cfg
        st = self.state
        lr = learning_rate(cfg, st.iteration)
        st.student, st.velocity = sgd_step(st.student, grads, st.velocity, lr, cfg.momentum, cfg.weight_decay)
        st.teacher = ema_update(st.teacher, st.student, cfg.ema_momentum)
        st.iteration += 1

    # -- phase 1 ---------------------------------------------------------

    def phase1_step(self) -> StepStats:
        """Masked-region regression plus the DMIL losses on one scene."""
        cfg = self.cfg
        view = self._next_view()
        regions = sample_mask_regions(view.extent(), cfg.mask_count, tuple(cfg.mask_scale), self.rngs["mask"])
        masks = np.stack([as_array(reg.region) for reg in regions])
        signal = apply_mask(view.signal(cfg.n_classes), regions)
        grid = build_feature_grid(signal)
        maps = IntegralMaps(signal)
        anchors = self._anchors(grid)
        centers = anchors[:, :2]
        out = forward(self.state.student, grid, anchors)

        pos = assign_labels(view.points, centers)
        l_cls, d_logits = classification_loss(out.logits, pos, view.point_classes, cfg.focal_alpha, cfg.focal_gamma)
        mask_cells = assign_labels(masks[:, :2], centers)
        l_sa, d_deltas = box_regression_loss(anchors, out.deltas, mask_cells, masks, cfg.r)
        grads = head_backward(self.state.student, out, d_logits, d_deltas)

        ext = self._bags(masks)
        l_dreg = self._dmil_reg(proposal_features(ext, maps), ext, masks, grads)

        l_dcls = 0.0
        if self.scorer.trainable and len(view.points):
            t_out = forward(self.state.teacher, grid, anchors)
            ok = pos >= 0
            seeds = decode_cells(anchors[pos[ok]], t_out.deltas[pos[ok]])
            t_ext = self._bags(seeds)
            refined = refine_bag(t_ext, dmil_deltas(self.state.teacher, proposal_features(t_ext, maps)))
            ctx = view.scoring_context(maps, self.rngs["scorer"])
            l_dcls = self._dmil_cls(seeds, view.point_classes[ok], refined, maps, ctx, view, grads)

        total = l_cls + compose_phase1(l_sa, l_dreg, l_dcls, cfg.alpha1, cfg.alpha2)
        stats = StepStats(self.state.iteration, 1, total, l_cls, l_sa, l_dreg, l_dcls, len(view.points))
        self._finish_step(grads)
        return stats

    # -- phase 2 ---------------------------------------------------------

    def phase2_step(self) -> StepStats:
        """Teacher pseudo boxes, DMIL refinement and one student update."""
        cfg = self.cfg
        st = self.state
        view = self._next_view()
        grid, maps = self._clean_inputs(view)
        anchors = self._anchors(grid)
        centers = anchors[:, :2]

        t_out = forward(st.teacher, grid, anchors)
        preds = predictions_from_output(t_out, cfg.pred_threshold)
        matched, coarse = coarse_pseudo_boxes(view.points, view.point_classes, preds, cfg.k1, cfg.k2, cfg.class_gating)
        grads: Params = {}
        l_dreg = l_dcls = 0.0
        refined_boxes = coarse.copy()
        if len(matched):
            classes = view.point_classes[matched]
            ext = self._bags(coarse)
            feats = proposal_features(ext, maps)
            need_teacher_pass = cfg.beta < 1.0 or self.scorer.trainable
            if need_teacher_pass:
                refined = refine_bag(ext, dmil_deltas(st.teacher, feats))
                ctx = view.scoring_context(maps, self.rngs["scorer"])
            if cfg.beta < 1.0:
                sheet = self.scorer.score(refined, ctx, scorer_params(st.teacher))
                bag = score_bag(sheet.cls_logits, sheet.ins_logits)
                refined_boxes = select_and_fuse_batch(refined, bag.s, coarse, classes, cfg.k3, cfg.beta)
            l_dreg = self._dmil_reg(feats, ext, refined_boxes, grads)
            if self.scorer.trainable:
                l_dcls = self._dmil_cls(coarse, classes, refined, maps, ctx, view, grads)

        # classification targets: refined centers where matched, the point itself otherwise
        targets_xy = view.points.copy()
        targets_xy[matched] = refined_boxes[:, :2]
        pos = assign_labels(targets_xy, centers)
        out = forward(st.student, grid, anchors)
        l_cls, d_logits = classification_loss(out.logits, pos, view.point_classes, cfg.focal_alpha, cfg.focal_gamma)
        l_na, d_deltas = box_regression_loss(anchors, out.deltas, pos[matched], refined_boxes, cfg.r)
        grads.update(head_backward(st.student, out, d_logits, d_deltas))

        self._log_pseudo(view, matched, coarse, refined_boxes)
        total = l_cls + compose_phase2(l_na, l_dreg, l_dcls, cfg.alpha1, cfg.alpha2)
        stats = StepStats(st.iteration, 2, total, l_cls, l_na, l_dreg, l_dcls, len(view.points), len(matched))
        self._finish_step(grads)
        return stats

    def _log_pseudo(self, view: SceneView, matched, coarse, refined) -> None:
        if self.log_sink is None:
            return
        it = self.state.iteration
        for row, j in enumerate(matched):
            gt = view.gt_for_point(int(j))
            rec = {
                "iter": it,
                "round": self.round_of(it),
                "scene_id": view.id,
                "point_idx": int(j),
                "object_id": view.object_ids[int(j)],
                "theta_coarse": [round(float(v), 4) for v in coarse[row]],
                "theta_refined": [round(float(v), 4) for v in refined[row]],
                "iou_gt": None if gt is None else round(float(iou_arrays(refined[row], gt)), 6),
                "iou_gt_coarse": None if gt is None else round(float(iou_arrays(coarse[row], gt)), 6),
            }
            self.log_sink(rec)

    # -- schedules -------------------------------------------------------

    def train_phase1(self, iters: int) -> TrainState:
        for _ in range(iters):
            self.stats.append(self.phase1_step())
        return self.state

    def train_phase2(self, iters: int) -> TrainState:
        for _ in range(iters):
            self.stats.append(self.phase2_step())
        return self.state

    def train(self) -> TrainState:
        """Phase 1 for the configured fraction of iterations, phase 2 for the rest."""
        n1 = self.cfg.phase1_iters
        self.train_phase1(n1)
        self.train_phase2(self.cfg.iterations - n1)
        return self.state


def train_phase1(trainer: Trainer, iters: int) -> TrainState:
    if iters < 1:
        raise ParameterError(f"iters must be >= 1, got {iters}")
    return trainer.train_phase1(iters)


def train_phase2(trainer: Trainer, iters: int) -> TrainState:
    if iters < 1:
        raise ParameterError(f"iters must be >= 1, got {iters}")
    return trainer.train_phase2(iters)
