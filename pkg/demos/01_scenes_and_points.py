"""From boxes to points: what a point-annotated scene looks like.

Generates a few synthetic scenes, simulates one annotated point per object at
several noise levels and shows how far the points drift from the box centers.
Run with ``python3 demos/01_scenes_and_points.py``.
"""

import numpy as np

from pointsup.geometry import contains_point
from pointsup.scenes import generate_scenes, render_signal, simulate_points

rng = np.random.default_rng(0)
scenes = generate_scenes(5, rng, size=(128, 128))
print(f"{len(scenes)} scenes, {sum(len(s.objects) for s in scenes)} objects")
for obj in scenes[0].objects[:3]:
    g = obj.gt
    print(f"  class {obj.class_id}: center ({g.cx:.1f}, {g.cy:.1f}), size {g.w:.1f} x {g.h:.1f}")

# The noise level m is the width of the uniform offset, as a fraction of the box size.
for m in (0.0, 0.3, 0.6, 1.0):
    points = simulate_points(scenes, m, np.random.default_rng(1))
    offsets, inside = [], []
    for p in points:
        gt = next(s for s in scenes if s.id == p.scene_id).objects[p.object_id].gt
        offsets.append(max(abs(p.p.x - gt.cx) / gt.w, abs(p.p.y - gt.cy) / gt.h))
        inside.append(contains_point(gt, p.p))
    print(f"m={m:.1f}: worst relative offset {max(offsets):.3f}, all points inside their box: {all(inside)}")

# The detector sees a one-hot signal: background plus one channel per class.
signal = render_signal(scenes[0], 3)
print("signal shape", signal.shape, "foreground pixels per class", signal[..., 1:].sum(axis=(0, 1)))
