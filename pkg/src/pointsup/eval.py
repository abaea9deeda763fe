"""
Average precision and pseudo-box quality.

AP uses greedy matching per class: detections are visited by descending
score (ties broken by scene id, then box coordinates) and each takes the
unmatched same-class GT in its scene with the highest IoU at or above the
threshold (ties by GT index).  The PR curve is interpolated at every point
(precision envelope) and integrated over recall.

Size buckets split GT by area ``w * h``.  Inside a bucket, GT of other sizes
are ignored: a detection matched to one is dropped rather than counted, and
an unmatched detection is dropped when its own area lies outside the bucket.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ParameterError
from .geometry import as_array, iou_arrays, pairwise_iou
from .scenes import Scene, _class_index

logger = logging.getLogger(__name__)

DEFAULT_EDGES = (64.0, 256.0, 1024.0)
DEFAULT_NAMES = ("vt", "t", "s", "m")


@dataclass(frozen=True)
class Detection:
    scene_id: str
    box: Tuple[float, ...]
    class_id: int
    score: float

    def __post_init__(self):
        box = tuple(float(v) for v in self.box)
        if len(box) not in (4, 5) or not all(np.isfinite(box)) or box[2] <= 0 or box[3] <= 0:
            raise ParameterError(f"invalid detection box {self.box}")
        if not 0.0 <= self.score <= 1.0:
            raise ParameterError(f"detection score must lie in [0, 1], got {self.score}")
        object.__setattr__(self, "box", box)


@dataclass
class EvalReport:
    mAP: float
    per_class: Dict[int, float]
    per_size: Dict[str, Optional[float]]
    pr_curves: Dict[int, Tuple[np.ndarray, np.ndarray]] = field(repr=False, default_factory=dict)
    n_gt: Dict[int, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mAP": self.mAP,
            "per_class": {str(k): v for k, v in sorted(self.per_class.items())},
            "per_size": dict(self.per_size),
            "n_gt": {str(k): v for k, v in sorted(self.n_gt.items())},
            "pr_curves": {
                str(k): {"recall": [float(x) for x in r], "precision": [float(x) for x in p]}
                for k, (r, p) in sorted(self.pr_curves.items())
            },
        }


def average_precision(tp: np.ndarray, n_pos: int) -> Tuple[float, np.ndarray, np.ndarray]:
    """All-point interpolated AP from a ranked TP indicator (FP = not TP).

    Returns:
        ``(ap, recall, precision)`` where the curves are the raw cumulative
        values at every rank.
    """
    tp = np.asarray(tp, dtype=float)
    if n_pos <= 0:
        raise ParameterError("average precision needs at least one positive")
    if tp.size == 0:
        return 0.0, np.zeros(0), np.zeros(0)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_pos
    precision = ctp / (ctp + cfp)
    r = np.concatenate([[0.0], recall])
    p = np.concatenate([[0.0], precision])
    envelope = np.maximum.accumulate(p[::-1])[::-1]
    ap = float(np.sum((r[1:] - r[:-1]) * envelope[1:]))
    return ap, recall, precision


def _rank(dets: Sequence[Detection]) -> List[Detection]:
    return sorted(dets, key=lambda d: (-d.score, d.scene_id, d.box, d.class_id))


def _bucket_of(areas: np.ndarray, edges: Sequence[float]) -> np.ndarray:
    return np.searchsorted(np.asarray(edges, dtype=float), areas, side="right")


def evaluate(
    dets: Iterable[Detection],
    scenes: Sequence[Scene],
    iou_thr: float = 0.25,
    size_edges: Sequence[float] = DEFAULT_EDGES,
    size_names: Sequence[str] = DEFAULT_NAMES,
    n_classes: Optional[int] = None,
) -> EvalReport:
    """AP per class, mAP over classes that have GT, and AP per size bucket."""
    if not 0.0 < iou_thr < 1.0:
        raise ParameterError(f"iou_thr must lie in (0, 1), got {iou_thr}")
    if len(size_names) != len(size_edges) + 1:
        raise ParameterError("size_names needs exactly one more entry than size_edges")
    dets = list(dets)
    if n_classes is None:
        ids = [o.class_id for s in scenes for o in s.objects] + [d.class_id for d in dets]
        n_classes = max(ids) + 1 if ids else 0
    by_scene = {s.id: s for s in scenes}
    unknown = {d.scene_id for d in dets} - set(by_scene)
    if unknown:
        raise ParameterError(f"detections reference unknown scenes: {sorted(unknown)}")

    gt: Dict[Tuple[str, int], np.ndarray] = {}
    for s in scenes:
        boxes, classes = s.gt_array(), s.class_array()
        for c in range(n_classes):
            gt[(s.id, c)] = boxes[classes == c]

    per_class: Dict[int, float] = {}
    pr_curves: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}
    n_gt: Dict[int, int] = {}
    size_ap: Dict[int, List[float]] = {b: [] for b in range(len(size_names))}
    for c in range(n_classes):
        gt_c = {sid: gt[(sid, c)] for sid in by_scene}
        count = sum(len(v) for v in gt_c.values())
        n_gt[c] = count
        if count == 0:
            logger.info("class %d has no GT; excluded from mAP", c)
            continue
        ranked = _rank([d for d in dets if d.class_id == c])
        matched_gt = _greedy_match(ranked, gt_c, iou_thr)

        tp = np.array([m is not None for m in matched_gt], dtype=float)
        ap, recall, precision = average_precision(tp, count)
        per_class[c] = ap
        pr_curves[c] = (recall, precision)

        gt_bucket = {sid: _bucket_of(b[:, 2] * b[:, 3], size_edges) for sid, b in gt_c.items()}
        det_bucket = _bucket_of(np.array([d.box[2] * d.box[3] for d in ranked]), size_edges) if ranked else np.zeros(0, int)
        for b in range(len(size_names)):
            n_pos = sum(int((v == b).sum()) for v in gt_bucket.values())
            if n_pos == 0:
                continue
            flags = []
            for k, (det, m) in enumerate(zip(ranked, matched_gt)):
                if m is None:
                    if det_bucket[k] == b:
                        flags.append(0.0)
                elif gt_bucket[det.scene_id][m] == b:
                    flags.append(1.0)
            size_ap[b].append(average_precision(np.array(flags), n_pos)[0])

    m_ap = float(np.mean(list(per_class.values()))) if per_class else 0.0
    per_size = {name: (float(np.mean(size_ap[b])) if size_ap[b] else None) for b, name in enumerate(size_names)}
    return EvalReport(m_ap, per_class, per_size, pr_curves, n_gt)


def _greedy_match(ranked: Sequence[Detection], gt_c: Dict[str, np.ndarray], iou_thr: float) -> List[Optional[int]]:
    used = {sid: np.zeros(len(b), dtype=bool) for sid, b in gt_c.items()}
    out: List[Optional[int]] = []
    for det in ranked:
        boxes = gt_c[det.scene_id]
        if len(boxes) == 0:
            out.append(None)
            continue
        box = np.asarray(det.box)
        if box.shape[0] != boxes.shape[1]:
            box = np.concatenate([box, [0.0]]) if box.shape[0] == 4 else box[:4]
        ious = pairwise_iou(box[None], boxes)[0]
        ious = np.where(used[det.scene_id] | (ious < iou_thr), -1.0, ious)
        k = int(np.argmax(ious))
        if ious[k] < 0:
            out.append(None)
        else:
            used[det.scene_id][k] = True
            out.append(k)
    return out


# ---------------------------------------------------------------------------
# Pseudo-box quality from the evolution log
# ---------------------------------------------------------------------------


@dataclass
class RoundQuality:
    round: int
    n: int
    mean_refined: float
    median_refined: float
    mean_coarse: float
    median_coarse: float


def pseudo_quality(records: Iterable[dict], scenes: Sequence[Scene]):
    """Per-round IoU statistics of coarse and refined pseudo boxes against GT.

    Records need ``round``, ``scene_id``, ``object_id``, ``theta_coarse`` and
    ``theta_refined``.  Records whose object cannot be found are skipped.

    Returns:
        ``(rounds, skipped)``: a list of :class:`RoundQuality` sorted by round
        and the number of skipped records.
    """
    records = list(records)
    if not records:
        raise ParameterError("pseudo_quality needs a non-empty log")
    by_scene = {s.id: s for s in scenes}
    per_round: Dict[int, Tuple[List[float], List[float]]] = {}
    skipped = 0
    for rec in records:
        scene = by_scene.get(rec.get("scene_id"))
        oid = rec.get("object_id")
        if scene is None or oid is None or not 0 <= oid < len(scene.objects):
            skipped += 1
            continue
        gt = as_array(scene.objects[oid].gt)
        refined = float(iou_arrays(np.asarray(rec["theta_refined"], dtype=float), gt))
        coarse = float(iou_arrays(np.asarray(rec["theta_coarse"], dtype=float), gt))
        lists = per_round.setdefault(int(rec["round"]), ([], []))
        lists[0].append(refined)
        lists[1].append(coarse)
    if skipped:
        logger.warning("pseudo_quality skipped %d records with unknown objects", skipped)
    rounds = [
        RoundQuality(k, len(r), float(np.mean(r)), float(np.median(r)), float(np.mean(c)), float(np.median(c)))
        for k, (r, c) in sorted(per_round.items())
    ]
    return rounds, skipped


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------


def save_detections(dets: Sequence[Detection], classes: Sequence[str], path) -> None:
    Path(path).write_text(
        json.dumps(
            [{"scene_id": d.scene_id, "class": classes[d.class_id], "box": list(d.box), "score": d.score} for d in dets],
            indent=1,
        )
    )


def load_detections(path, classes: Sequence[str]) -> List[Detection]:
    return [
        Detection(str(r["scene_id"]), tuple(r["box"]), _class_index(r["class"], classes), float(r["score"]))
        for r in json.loads(Path(path).read_text())
    ]


def report_rows(report: EvalReport, classes: Optional[Sequence[str]] = None) -> List[Tuple[str, str]]:
    """Flat ``(name, value)`` rows; missing buckets are written as an empty value."""
    rows = [("mAP", f"{report.mAP:.6f}")]
    for c, ap in sorted(report.per_class.items()):
        name = classes[c] if classes else str(c)
        rows.append((f"AP/{name}", f"{ap:.6f}"))
    for name, ap in report.per_size.items():
        rows.append((f"AP_{name}", "" if ap is None else f"{ap:.6f}"))
    return rows


def write_report(report: EvalReport, out_dir, classes: Optional[Sequence[str]] = None, header: Sequence[str] = ()) -> None:
    """Write ``report.json`` and ``report.csv`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=1))
    with open(out / "report.csv", "w", newline="") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh)
        writer.writerow(["name", "value"])
        writer.writerows(report_rows(report, classes))
