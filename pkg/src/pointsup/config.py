"""
Run configuration.

One JSON object holds every tunable value; ``--set key=value`` overrides are
parsed as JSON when possible (so ``--set beta=1`` gives a number and
``--set construct_scales=[1.0]`` a list) and as plain strings otherwise.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

from .errors import ParameterError


@dataclass
class RunConfig:
    task: str = "hbb"
    seed: int = 0

    # data; when paths are unset, scenes are generated from the seed
    dataset: Optional[str] = None
    points: Optional[str] = None
    eval_dataset: Optional[str] = None
    n_train_scenes: int = 200
    n_eval_scenes: int = 50
    scene_size: int = 256
    n_classes: int = 3
    objects_per_scene: List[int] = field(default_factory=lambda: [3, 10])
    object_size: List[float] = field(default_factory=lambda: [8.0, 24.0])
    m: float = 1.0

    # schedule and optimizer
    iterations: int = 8000
    phase1_fraction: float = 0.05
    lr: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay_points: List[float] = field(default_factory=lambda: [8 / 12, 11 / 12])
    lr_decay_factor: float = 0.1
    ema_momentum: float = 0.999

    # pseudo labels
    beta: float = 0.25
    r: float = 0.2
    k1: int = 5
    k2: int = 3
    k3: int = 1
    class_gating: bool = True
    pred_threshold: float = 0.05

    # losses
    alpha1: float = 0.01
    alpha2: float = 0.25
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    # masked-region sampling
    mask_count: int = 8
    mask_scale: List[float] = field(default_factory=lambda: [8.0, 64.0])

    # DMIL
    construct_scales: List[float] = field(default_factory=lambda: [0.7, 0.85, 1.0, 1.15, 1.3])
    construct_offsets: List[float] = field(default_factory=lambda: [-0.25, 0.0, 0.25])
    extend_scales: List[float] = field(default_factory=lambda: [0.9, 1.0, 1.1])
    extend_offsets: List[float] = field(default_factory=lambda: [-0.1, 0.0, 0.1])
    n_neg: int = 200

    # scorer
    scorer: str = "oracle"
    oracle_noise_sigma: float = 0.5

    # evaluation
    eval_iou: float = 0.25
    nms_iou: Optional[float] = 0.5  # None disables suppression at inference
    size_bucket_edges: List[float] = field(default_factory=lambda: [64.0, 256.0, 1024.0])
    size_bucket_names: List[str] = field(default_factory=lambda: ["vt", "t", "s", "m"])

    def __post_init__(self):
        self.validate()

    @property
    def phase1_iters(self) -> int:
        return int(round(self.iterations * self.phase1_fraction))

    def validate(self) -> None:
        def need(ok: bool, name: str, rule: str):
            if not ok:
                raise ParameterError(f"config field '{name}' = {getattr(self, name)!r} violates {rule}")

        need(self.task in ("hbb", "obb"), "task", "one of 'hbb', 'obb'")
        need(self.scorer in ("oracle", "linear"), "scorer", "one of 'oracle', 'linear'")
        need(0.0 <= self.m <= 1.0, "m", "0 <= m <= 1")
        need(self.iterations >= 1, "iterations", "iterations >= 1")
        need(0.0 <= self.phase1_fraction <= 1.0, "phase1_fraction", "0 <= phase1_fraction <= 1")
        need(self.lr > 0, "lr", "lr > 0")
        need(0.0 <= self.momentum < 1.0, "momentum", "0 <= momentum < 1")
        need(self.weight_decay >= 0, "weight_decay", "weight_decay >= 0")
        need(0.0 < self.ema_momentum < 1.0, "ema_momentum", "0 < ema_momentum < 1")
        need(0.0 <= self.beta <= 1.0, "beta", "0 <= beta <= 1")
        need(0.0 <= self.r < 1.0, "r", "0 <= r < 1")
        need(self.k1 >= 1, "k1", "k1 >= 1")
        need(1 <= self.k2 <= self.k1, "k2", "1 <= k2 <= k1")
        need(self.k3 >= 1, "k3", "k3 >= 1")
        need(0.0 <= self.pred_threshold < 1.0, "pred_threshold", "0 <= pred_threshold < 1")
        need(self.alpha1 >= 0, "alpha1", "alpha1 >= 0")
        need(self.alpha2 >= 0, "alpha2", "alpha2 >= 0")
        need(0.0 <= self.focal_alpha <= 1.0, "focal_alpha", "0 <= focal_alpha <= 1")
        need(self.focal_gamma >= 0, "focal_gamma", "focal_gamma >= 0")
        need(self.mask_count >= 1, "mask_count", "mask_count >= 1")
        need(
            len(self.mask_scale) == 2 and 0 < self.mask_scale[0] <= self.mask_scale[1] <= self.scene_size,
            "mask_scale",
            "[min, max] with 0 < min <= max <= scene_size",
        )
        need(self.n_neg >= 0, "n_neg", "n_neg >= 0")
        need(self.oracle_noise_sigma >= 0, "oracle_noise_sigma", "oracle_noise_sigma >= 0")
        need(0.0 < self.eval_iou < 1.0, "eval_iou", "0 < eval_iou < 1")
        need(self.nms_iou is None or 0.0 < self.nms_iou <= 1.0, "nms_iou", "null or 0 < nms_iou <= 1")
        need(self.n_classes >= 1, "n_classes", "n_classes >= 1")
        need(self.n_train_scenes >= 1, "n_train_scenes", "n_train_scenes >= 1")
        need(self.n_eval_scenes >= 0, "n_eval_scenes", "n_eval_scenes >= 0")
        need(self.scene_size >= 16, "scene_size", "scene_size >= 16")
        need(
            len(self.objects_per_scene) == 2 and 0 <= self.objects_per_scene[0] <= self.objects_per_scene[1],
            "objects_per_scene",
            "[min, max] with 0 <= min <= max",
        )
        need(
            len(self.object_size) == 2 and 0 < self.object_size[0] <= self.object_size[1] < self.scene_size,
            "object_size",
            "[min, max] with 0 < min <= max < scene_size",
        )
        for name in ("construct_scales", "extend_scales"):
            need(len(getattr(self, name)) >= 1 and all(s > 0 for s in getattr(self, name)), name, "non-empty, all > 0")
        for name in ("construct_offsets", "extend_offsets"):
            need(len(getattr(self, name)) >= 1 and all(math.isfinite(s) for s in getattr(self, name)), name, "non-empty, finite")
        bag_size = len(self.construct_scales) * len(self.construct_offsets) ** 2
        ext_size = len(self.extend_scales) * len(self.extend_offsets) ** 2
        need(self.k3 <= bag_size * ext_size, "k3", f"k3 <= U1*U2 = {bag_size * ext_size}")
        need(list(self.size_bucket_edges) == sorted(self.size_bucket_edges), "size_bucket_edges", "ascending")
        need(
            len(self.size_bucket_names) == len(self.size_bucket_edges) + 1,
            "size_bucket_names",
            "one more name than size_bucket_edges",
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ParameterError(f"unknown config field(s): {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def with_overrides(self, overrides: Sequence[str]) -> "RunConfig":
        data = self.to_dict()
        for item in overrides:
            if "=" not in item:
                raise ParameterError(f"override {item!r} is not of the form key=value")
            key, raw = item.split("=", 1)
            key = key.strip()
            if key not in data:
                raise ParameterError(f"unknown config field '{key}'")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            data[key] = value
        return RunConfig.from_dict(data)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)
