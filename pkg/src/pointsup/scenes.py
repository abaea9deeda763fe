"""
Synthetic scenes, point annotations and masked regions.

A scene is a rectangle of ``width x height`` pixels holding labelled boxes.
The detector never sees the boxes directly; it sees a rasterized *signal*:
a one-hot map with channel 0 for background and channel ``1 + c`` for objects
of class ``c``.  Masking a region zeroes every channel inside it, so a masked
pixel is recognisable as a "hole" (all channels zero).

File formats
------------
Dataset (JSON)::

    {"task": "hbb" | "obb",
     "classes": ["name0", "name1", ...],
     "scenes": [{"id": "s0", "width": 256, "height": 256,
                 "objects": [{"class": "name0", "box": [cx, cy, w, h(, theta)]}]}]}

Point annotations (JSON list)::

    [{"scene_id": "s0", "x": 12.5, "y": 40.0, "class": "name0"}, ...]

Point records written by :func:`save_points` also carry ``"object_id"``
(index of the generating object); readers treat it as optional.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ParameterError
from .geometry import Box, HBox, OBox, Point2D, as_array, box_from_array, box_hull, points_in_boxes


@dataclass(frozen=True)
class SceneObject:
    class_id: int
    gt: Box


@dataclass(frozen=True)
class Scene:
    id: str
    width: int
    height: int
    objects: Tuple[SceneObject, ...] = ()

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ParameterError(f"scene {self.id}: width and height must be positive")
        object.__setattr__(self, "objects", tuple(self.objects))
        for obj in self.objects:
            hull = box_hull(as_array(obj.gt))
            x1, y1 = hull[0] - hull[2] / 2, hull[1] - hull[3] / 2
            x2, y2 = hull[0] + hull[2] / 2, hull[1] + hull[3] / 2
            tol = 1e-9
            if x1 < -tol or y1 < -tol or x2 > self.width + tol or y2 > self.height + tol:
                raise ParameterError(f"scene {self.id}: object {obj.gt} leaves the extent")

    def gt_array(self) -> np.ndarray:
        if not self.objects:
            return np.zeros((0, 5 if self.is_oriented else 4))
        return np.stack([as_array(o.gt) for o in self.objects])

    def class_array(self) -> np.ndarray:
        return np.array([o.class_id for o in self.objects], dtype=int)

    @property
    def is_oriented(self) -> bool:
        return any(isinstance(o.gt, OBox) for o in self.objects)


@dataclass(frozen=True)
class PointAnnotation:
    p: Point2D
    class_id: int
    scene_id: str = ""
    # provenance for diagnostics only
    object_id: Optional[int] = None


@dataclass(frozen=True)
class MaskRegion:
    region: Box


@dataclass
class Dataset:
    task: str
    classes: List[str]
    scenes: List[Scene] = field(default_factory=list)

    def __post_init__(self):
        if self.task not in ("hbb", "obb"):
            raise ParameterError(f"task must be 'hbb' or 'obb', got {self.task!r}")

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "classes": list(self.classes),
            "scenes": [
                {
                    "id": s.id,
                    "width": s.width,
                    "height": s.height,
                    "objects": [
                        {"class": self.classes[o.class_id], "box": [float(v) for v in as_array(o.gt)]}
                        for o in s.objects
                    ],
                }
                for s in self.scenes
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Dataset":
        classes = list(data["classes"])
        task = data["task"]
        scenes = []
        for s in data["scenes"]:
            objects = []
            for o in s["objects"]:
                box = box_from_array(o["box"])
                if task == "obb" and isinstance(box, HBox):
                    box = OBox(box.cx, box.cy, box.w, box.h, 0.0)
                objects.append(SceneObject(_class_index(o["class"], classes), box))
            scenes.append(Scene(str(s["id"]), int(s["width"]), int(s["height"]), tuple(objects)))
        return cls(task, classes, scenes)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "Dataset":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _class_index(value, classes: Sequence[str]) -> int:
    if isinstance(value, (int, np.integer)):
        idx = int(value)
    else:
        if value not in classes:
            raise ParameterError(f"unknown class {value!r}")
        idx = classes.index(value)
    if not 0 <= idx < len(classes):
        raise ParameterError(f"class index {idx} out of range")
    return idx


def save_points(points: Sequence[PointAnnotation], classes: Sequence[str], path) -> None:
    records = []
    for a in points:
        rec = {"scene_id": a.scene_id, "x": float(a.p.x), "y": float(a.p.y), "class": classes[a.class_id]}
        if a.object_id is not None:
            rec["object_id"] = int(a.object_id)
        records.append(rec)
    Path(path).write_text(json.dumps(records, indent=1))


def load_points(path, classes: Sequence[str]) -> List[PointAnnotation]:
    records = json.loads(Path(path).read_text())
    return [
        PointAnnotation(
            Point2D(float(r["x"]), float(r["y"])),
            _class_index(r["class"], classes),
            str(r["scene_id"]),
            r.get("object_id"),
        )
        for r in records
    ]


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def generate_scenes(
    n_scenes: int,
    rng: np.random.Generator,
    *,
    size: Tuple[int, int] = (256, 256),
    n_objects: Tuple[int, int] = (3, 10),
    object_size: Tuple[float, float] = (8.0, 24.0),
    n_classes: int = 3,
    task: str = "hbb",
    min_gap: float = 2.0,
    prefix: str = "s",
) -> List[Scene]:
    """Random scenes of non-overlapping tiny objects.

    Object sides are uniform in ``object_size`` and the object count per scene
    uniform in ``n_objects`` (inclusive).  Objects are kept ``min_gap`` pixels
    apart (hull to hull) so every object stays visible in the raster.
    """
    width, height = size
    scenes = []
    for k in range(n_scenes):
        count = int(rng.integers(n_objects[0], n_objects[1] + 1))
        placed: List[np.ndarray] = []
        objects = []
        attempts = 0
        while len(objects) < count and attempts < 1000:
            attempts += 1
            w, h = rng.uniform(*object_size, size=2)
            theta = rng.uniform(-math.pi / 2, math.pi / 2) if task == "obb" else 0.0
            hull = box_hull(np.array([0.0, 0.0, w, h, theta]))
            cx = rng.uniform(hull[2] / 2, width - hull[2] / 2)
            cy = rng.uniform(hull[3] / 2, height - hull[3] / 2)
            cand = np.array([cx, cy, hull[2] + min_gap, hull[3] + min_gap])
            if any(_hulls_overlap(cand, p) for p in placed):
                continue
            placed.append(cand)
            box = OBox(cx, cy, w, h, theta) if task == "obb" else HBox(cx, cy, w, h)
            objects.append(SceneObject(int(rng.integers(n_classes)), box))
        scenes.append(Scene(f"{prefix}{k}", width, height, tuple(objects)))
    return scenes


def _hulls_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    return abs(a[0] - b[0]) * 2 < a[2] + b[2] and abs(a[1] - b[1]) * 2 < a[3] + b[3]


def simulate_point(gt: Box, m: float, rng: np.random.Generator) -> Point2D:
    """Simulated annotated point for a box with location noise ``m``.

    Offsets are drawn from ``U(-m/2, m/2)`` and scaled by the box size; for
    rotated boxes the x offset is scaled by ``w*cos(theta)`` and the y offset
    by ``h*sin(theta)``.
    """
    if not 0.0 <= m <= 1.0:
        raise ParameterError(f"m must lie in [0, 1], got {m}")
    dx, dy = rng.uniform(-m / 2, m / 2, size=2) if m > 0 else (0.0, 0.0)
    if isinstance(gt, OBox):
        return Point2D(gt.cx + dx * gt.w * math.cos(gt.theta), gt.cy + dy * gt.h * math.sin(gt.theta))
    return Point2D(gt.cx + dx * gt.w, gt.cy + dy * gt.h)


def simulate_points(scenes: Sequence[Scene], m: float, rng: np.random.Generator) -> List[PointAnnotation]:
    points = []
    for scene in scenes:
        for j, obj in enumerate(scene.objects):
            points.append(PointAnnotation(simulate_point(obj.gt, m, rng), obj.class_id, scene.id, j))
    return points


def sample_mask_regions(
    scene: Scene,
    count: int,
    scale_range: Tuple[float, float],
    rng: np.random.Generator,
    oriented: bool = False,
) -> List[MaskRegion]:
    """Uniformly placed random regions fully inside the scene extent."""
    lo, hi = scale_range
    if count < 1:
        raise ParameterError(f"count must be >= 1, got {count}")
    if not 0 < lo <= hi or hi > min(scene.width, scene.height):
        raise ParameterError(f"infeasible scale_range {scale_range} for a {scene.width}x{scene.height} scene")
    regions = []
    for _ in range(count):
        w, h = rng.uniform(lo, hi, size=2)
        if oriented:
            theta = rng.uniform(-math.pi / 2, math.pi / 2)
            hull = box_hull(np.array([0.0, 0.0, w, h, theta]))
            # a long thin region at 45 degrees may not fit; shrink to the extent
            shrink = min(1.0, scene.width / hull[2], scene.height / hull[3])
            w, h = w * shrink, h * shrink
            hw, hh = hull[2] * shrink / 2, hull[3] * shrink / 2
            cx = rng.uniform(hw, scene.width - hw)
            cy = rng.uniform(hh, scene.height - hh)
            regions.append(MaskRegion(OBox(cx, cy, w, h, theta)))
        else:
            cx = rng.uniform(w / 2, scene.width - w / 2)
            cy = rng.uniform(h / 2, scene.height - h / 2)
            regions.append(MaskRegion(HBox(cx, cy, w, h)))
    return regions


# ---------------------------------------------------------------------------
# Raster signal
# ---------------------------------------------------------------------------


def _raster_mask(box: np.ndarray, height: int, width: int) -> Tuple[slice, slice, np.ndarray]:
    hull = box_hull(box)
    x1 = max(int(math.floor(hull[0] - hull[2] / 2)), 0)
    x2 = min(int(math.ceil(hull[0] + hull[2] / 2)), width)
    y1 = max(int(math.floor(hull[1] - hull[3] / 2)), 0)
    y2 = min(int(math.ceil(hull[1] + hull[3] / 2)), height)
    if x2 <= x1 or y2 <= y1:
        return slice(0, 0), slice(0, 0), np.zeros((0, 0), dtype=bool)
    xs = np.arange(x1, x2) + 0.5
    ys = np.arange(y1, y2) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    inside = points_in_boxes(np.stack([gx.ravel(), gy.ravel()], axis=1), box[None])[:, 0]
    return slice(y1, y2), slice(x1, x2), inside.reshape(gy.shape)


def render_signal(scene: Scene, n_classes: int) -> np.ndarray:
    """One-hot ``(H, W, 1 + n_classes)`` map; a pixel belongs to a box when its center does."""
    signal = np.zeros((scene.height, scene.width, 1 + n_classes), dtype=float)
    signal[..., 0] = 1.0
    for obj in scene.objects:
        rows, cols, inside = _raster_mask(as_array(obj.gt), scene.height, scene.width)
        patch = signal[rows, cols]
        patch[inside] = 0.0
        patch[inside, 1 + obj.class_id] = 1.0
    return signal


def apply_mask(signal: np.ndarray, regions: Sequence[MaskRegion]) -> np.ndarray:
    """Copy of ``signal`` with every channel zeroed inside each region."""
    out = np.array(signal, dtype=float, copy=True)
    height, width = out.shape[:2]
    for reg in regions:
        rows, cols, inside = _raster_mask(as_array(reg.region), height, width)
        out[rows, cols][inside] = 0.0
    return out


class IntegralMaps:
    """Summed-area tables over derived signal maps.

    Maps (last axis): saliency (anything that is not background, i.e. objects
    and masked holes), hole indicator, then one occupancy map per class.
    Sums are looked up at integer pixel corners after rounding.  A compact
    ``dtype=np.float32`` table is exact for binary signals up to 2**24 pixels,
    since every entry is then an integer count.
    """

    def __init__(self, signal: np.ndarray, dtype=np.float64):
        signal = np.asarray(signal, dtype=float)
        self.height, self.width = signal.shape[:2]
        sal = 1.0 - signal[..., 0]
        hole = 1.0 - signal.sum(axis=-1)
        maps = np.concatenate([sal[..., None], hole[..., None], signal[..., 1:]], axis=-1)
        self.n_maps = maps.shape[-1]
        table = np.zeros((self.height + 1, self.width + 1, self.n_maps), dtype=dtype)
        table[1:, 1:] = maps.cumsum(axis=0).cumsum(axis=1)
        self.table = table

    def rect_sums(self, x1, y1, x2, y2) -> np.ndarray:
        """Sums over pixel rectangles ``[x1, x2) x [y1, y2)``; returns ``(..., n_maps)`` and areas."""
        x1 = np.clip(np.rint(x1), 0, self.width).astype(np.intp)
        x2 = np.clip(np.rint(x2), 0, self.width).astype(np.intp)
        y1 = np.clip(np.rint(y1), 0, self.height).astype(np.intp)
        y2 = np.clip(np.rint(y2), 0, self.height).astype(np.intp)
        x2 = np.maximum(x2, x1)
        y2 = np.maximum(y2, y1)
        t = self.table
        sums = (t[y2, x2] - t[y1, x2] - t[y2, x1] + t[y1, x1]).astype(float)
        area = ((x2 - x1) * (y2 - y1)).astype(float)
        return sums, area

    def rect_means(self, x1, y1, x2, y2) -> np.ndarray:
        sums, area = self.rect_sums(x1, y1, x2, y2)
        return sums / np.maximum(area, 1.0)[..., None]
