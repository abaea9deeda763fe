"""
End-to-end runs: data preparation, training, evaluation and run artifacts.

A run directory holds four files, each carrying the resolved config and the
package version:

* ``config.json``: the resolved config,
* ``checkpoint.json``: student and teacher parameters plus the iteration,
* ``evolution.jsonl``: a header line, then one line per phase-2 pseudo box,
* ``metrics.csv``: ``#`` comment lines, then ``name,value`` rows with the
  evaluation results and per-round statistics.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .config import RunConfig
from .detector import SceneView, StepStats, Trainer, TrainState, build_feature_grid, forward
from .geometry import nms
from .eval import Detection, EvalReport, RoundQuality, evaluate, pseudo_quality, report_rows
from .scenes import Dataset, PointAnnotation, Scene, generate_scenes, load_points, render_signal, simulate_points

logger = logging.getLogger(__name__)

STREAMS = ("scenes", "eval_scenes", "annotation", "order", "mask", "negatives", "scorer")


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
            check=True,
        )
        return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        return __version__


def seed_streams(seed: int) -> Dict[str, np.random.Generator]:
    """One independent generator per subsystem, all derived from ``seed``."""
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(s) for name, s in zip(STREAMS, children)}


@dataclass
class RunData:
    classes: List[str]
    train: List[Scene]
    points: List[PointAnnotation]
    eval: List[Scene]


def default_classes(n: int) -> List[str]:
    return [f"c{k}" for k in range(n)]


def prepare_data(cfg: RunConfig, rngs: Dict[str, np.random.Generator]) -> RunData:
    """Load or generate training scenes, points and held-out scenes."""
    size = (cfg.scene_size, cfg.scene_size)
    gen_kwargs = dict(
        size=size,
        n_objects=tuple(cfg.objects_per_scene),
        object_size=tuple(cfg.object_size),
        n_classes=cfg.n_classes,
        task=cfg.task,
    )
    if cfg.dataset:
        ds = Dataset.load(cfg.dataset)
        classes, train = ds.classes, ds.scenes
    else:
        classes = default_classes(cfg.n_classes)
        train = generate_scenes(cfg.n_train_scenes, rngs["scenes"], prefix="train", **gen_kwargs)
    if cfg.points:
        points = load_points(cfg.points, classes)
    else:
        points = simulate_points(train, cfg.m, rngs["annotation"])
    if cfg.eval_dataset:
        held_out = Dataset.load(cfg.eval_dataset).scenes
    else:
        held_out = generate_scenes(cfg.n_eval_scenes, rngs["eval_scenes"], prefix="eval", **gen_kwargs)
    return RunData(classes, train, points, held_out)


def make_views(scenes: Sequence[Scene], points: Sequence[PointAnnotation]) -> List[SceneView]:
    by_scene: Dict[str, List[PointAnnotation]] = {s.id: [] for s in scenes}
    for p in points:
        if p.scene_id in by_scene:
            by_scene[p.scene_id].append(p)
    return [SceneView.from_scene(s, by_scene[s.id]) for s in scenes]


def detect(params, scenes: Sequence[Scene], n_classes: int, threshold: float, nms_iou: Optional[float] = 0.5) -> List[Detection]:
    """Teacher detections on unannotated scenes.

    Every cell whose best class score reaches ``threshold`` proposes its
    decoded box under that class.  Unless ``nms_iou`` is None, proposals of
    the same class are then thinned by greedy non-maximum suppression.
    """
    dets = []
    for scene in scenes:
        out = forward(params, build_feature_grid(render_signal(scene, n_classes)))
        scores = out.scores
        best = scores.argmax(axis=1)
        top = scores[np.arange(len(best)), best]
        boxes = out.boxes
        for c in range(n_classes):
            idx = np.flatnonzero((best == c) & (top >= threshold))
            if nms_iou is not None:
                idx = idx[nms(boxes[idx], top[idx], nms_iou)]
            dets.extend(Detection(scene.id, tuple(boxes[k]), c, float(top[k])) for k in idx)
    return dets


@dataclass
class RunResult:
    config: RunConfig
    state: TrainState
    report: EvalReport
    rounds: List[RoundQuality]
    stats: List[StepStats]
    evolution: List[dict] = field(repr=False)
    version: str = ""
    n_train: int = 0  # training scenes actually used; a round is one pass over them

    def round_loss_means(self) -> Dict[int, float]:
        n1 = self.config.phase1_iters
        n_scenes = max(self.n_train or self.config.n_train_scenes, 1)
        sums: Dict[int, List[float]] = {}
        for s in self.stats:
            if s.phase == 2:
                sums.setdefault((s.iteration - n1) // n_scenes, []).append(s.loss_total)
        return {k: float(np.mean(v)) for k, v in sorted(sums.items())}


def run(cfg: RunConfig) -> RunResult:
    """Train with both phases and evaluate the teacher on the held-out scenes."""
    rngs = seed_streams(cfg.seed)
    data = prepare_data(cfg, rngs)
    if cfg.dataset and len(data.classes) != cfg.n_classes:
        cfg = RunConfig.from_dict({**cfg.to_dict(), "n_classes": len(data.classes)})
    evolution: List[dict] = []
    trainer = Trainer(cfg, make_views(data.train, data.points), rngs, evolution.append)
    state = trainer.train()
    dets = detect(state.teacher, data.eval, cfg.n_classes, cfg.pred_threshold, cfg.nms_iou)
    report = evaluate(dets, data.eval, cfg.eval_iou, cfg.size_bucket_edges, cfg.size_bucket_names, cfg.n_classes)
    rounds = pseudo_quality(evolution, data.train)[0] if evolution else []
    return RunResult(cfg, state, report, rounds, trainer.stats, evolution, version_string(), len(data.train))


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------


def metrics_rows(result: RunResult) -> List[tuple]:
    rows = [("eval/" + k, v) for k, v in report_rows(result.report)]
    losses = result.round_loss_means()
    for q in result.rounds:
        prefix = f"round/{q.round}"
        rows += [
            (f"{prefix}/n", str(q.n)),
            (f"{prefix}/median_iou_coarse", f"{q.median_coarse:.6f}"),
            (f"{prefix}/median_iou_refined", f"{q.median_refined:.6f}"),
            (f"{prefix}/mean_iou_coarse", f"{q.mean_coarse:.6f}"),
            (f"{prefix}/mean_iou_refined", f"{q.mean_refined:.6f}"),
        ]
        if q.round in losses:
            rows.append((f"{prefix}/mean_loss", f"{losses[q.round]:.6f}"))
    return rows


def metrics_csv(result: RunResult) -> str:
    buf = io.StringIO()
    buf.write(f"# version: {result.version}\n")
    buf.write(f"# config: {result.config.dumps()}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["name", "value"])
    writer.writerows(metrics_rows(result))
    return buf.getvalue()


def evolution_jsonl(result: RunResult) -> str:
    header = {"header": True, "version": result.version, "config": result.config.to_dict()}
    lines = [json.dumps(header, sort_keys=True)] + [json.dumps(r, sort_keys=True) for r in result.evolution]
    return "\n".join(lines) + "\n"


def checkpoint_dict(result: RunResult) -> dict:
    st = result.state
    return {
        "version": result.version,
        "config": result.config.to_dict(),
        "iteration": st.iteration,
        "student": {k: v.tolist() for k, v in sorted(st.student.items())},
        "teacher": {k: v.tolist() for k, v in sorted(st.teacher.items())},
        "ema_momentum": result.config.ema_momentum,
    }


def load_checkpoint(path) -> dict:
    data = json.loads(Path(path).read_text())
    for key in ("student", "teacher"):
        data[key] = {k: np.asarray(v, dtype=float) for k, v in data[key].items()}
    return data


def load_evolution(path):
    """``(header, records)`` from an evolution log."""
    lines = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    if lines and lines[0].get("header"):
        return lines[0], lines[1:]
    return {}, lines


def write_artifacts(result: RunResult, out_dir) -> Dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "config": out / "config.json",
        "checkpoint": out / "checkpoint.json",
        "evolution": out / "evolution.jsonl",
        "metrics": out / "metrics.csv",
    }
    paths["config"].write_text(json.dumps({"version": result.version, "config": result.config.to_dict()}, indent=1, sort_keys=True))
    paths["checkpoint"].write_text(json.dumps(checkpoint_dict(result), sort_keys=True))
    paths["evolution"].write_text(evolution_jsonl(result))
    paths["metrics"].write_text(metrics_csv(result))
    return paths


def read_metrics(path) -> tuple:
    """``(config, rows)`` from a metrics CSV written by :func:`write_artifacts`."""
    config: Optional[dict] = None
    rows: Dict[str, str] = {}
    with open(path) as fh:
        body = []
        for line in fh:
            if line.startswith("# config: "):
                config = json.loads(line[len("# config: "):])
            elif not line.startswith("#"):
                body.append(line)
    for rec in csv.DictReader(body):
        rows[rec["name"]] = rec["value"]
    return config, rows
