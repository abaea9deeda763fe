import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pointsup.errors import ParameterError
from pointsup.eval import (
    Detection,
    average_precision,
    evaluate,
    load_detections,
    pseudo_quality,
    save_detections,
    write_report,
)
from pointsup.geometry import HBox
from pointsup.scenes import Scene, SceneObject

# Hand-worked fixture: three GT, four detections ranked TP, FP, TP, TP.
# Precision at the recall steps is 1, 3/4, 3/4, so AP = (1 + 3/4 + 3/4) / 3.
FIXTURE_AP = 0.8333333333333333  # 5/6 as produced by the all-point sum


@pytest.fixture
def fixture_scene():
    objs = tuple(SceneObject(0, HBox(x, y, 10, 10)) for x, y in ((10, 10), (40, 10), (10, 40)))
    return Scene("f", 64, 64, objs)


@pytest.fixture
def fixture_dets():
    return [
        Detection("f", (10, 10, 10, 10), 0, 0.9),
        Detection("f", (50, 50, 10, 10), 0, 0.8),
        Detection("f", (41, 10, 10, 10), 0, 0.7),
        Detection("f", (10, 39, 10, 10), 0, 0.6),
    ]


class TestAveragePrecision:
    def test_fixture_curve(self):
        ap, rec, prec = average_precision(np.array([1, 0, 1, 1]), 3)
        assert ap == FIXTURE_AP
        np.testing.assert_allclose(prec, [1, 0.5, 2 / 3, 0.75])
        np.testing.assert_allclose(rec, [1 / 3, 1 / 3, 2 / 3, 1])

    def test_edge_cases(self):
        assert average_precision(np.ones(4), 4)[0] == 1.0
        assert average_precision(np.zeros(0), 2)[0] == 0.0
        assert average_precision(np.zeros(3), 2)[0] == 0.0
        with pytest.raises(ParameterError):
            average_precision(np.ones(1), 0)


class TestEvaluate:
    def test_fixture(self, fixture_scene, fixture_dets):
        rep = evaluate(fixture_dets, [fixture_scene], 0.25, n_classes=1)
        assert rep.mAP == FIXTURE_AP
        assert rep.per_size["t"] == FIXTURE_AP
        assert rep.per_size["vt"] is None

    def test_input_order_irrelevant(self, fixture_scene, fixture_dets):
        rng = np.random.default_rng(0)
        base = evaluate(fixture_dets, [fixture_scene], 0.25).mAP
        for _ in range(5):
            perm = [fixture_dets[i] for i in rng.permutation(4)]
            assert evaluate(perm, [fixture_scene], 0.25).mAP == base

    def test_perfect_and_empty(self, fixture_scene):
        perfect = [Detection("f", (o.gt.cx, o.gt.cy, o.gt.w, o.gt.h), 0, 1.0) for o in fixture_scene.objects]
        assert evaluate(perfect, [fixture_scene], 0.5).mAP == 1.0
        assert evaluate([], [fixture_scene], 0.5).mAP == 0.0

    def test_duplicate_is_false_positive(self, fixture_scene, fixture_dets):
        dets = fixture_dets[:1] + [Detection("f", (10, 10, 10, 10), 0, 0.85)]
        rep = evaluate(dets, [fixture_scene], 0.25)
        assert rep.mAP == pytest.approx(1 / 3)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_threshold_monotone(self, seed):
        rng = np.random.default_rng(seed)
        scene = Scene("r", 128, 128, tuple(SceneObject(int(rng.integers(2)), HBox(*rng.uniform(20, 108, 2), *rng.uniform(8, 20, 2))) for _ in range(5)))
        dets = []
        for o in scene.objects:
            g = o.gt
            dets.append(Detection("r", (g.cx + rng.normal(0, 3), g.cy + rng.normal(0, 3), g.w, g.h), o.class_id, float(rng.random())))
        values = [evaluate(dets, [scene], t, n_classes=2).mAP for t in (0.1, 0.3, 0.5, 0.7, 0.9)]
        assert all(a >= b - 1e-12 for a, b in zip(values, values[1:]))

    def test_unknown_scene(self, fixture_scene):
        with pytest.raises(ParameterError):
            evaluate([Detection("zz", (1, 1, 1, 1), 0, 0.5)], [fixture_scene])


class TestIO:
    def test_round_trip_and_report(self, tmp_path, fixture_scene, fixture_dets):
        save_detections(fixture_dets, ["a"], tmp_path / "d.json")
        loaded = load_detections(tmp_path / "d.json", ["a"])
        assert loaded == fixture_dets
        write_report(evaluate(loaded, [fixture_scene], 0.25), tmp_path / "out", ["a"], header=["x: 1"])
        text = (tmp_path / "out" / "report.csv").read_text()
        assert text.startswith("# x: 1") and "mAP" in text
        assert (tmp_path / "out" / "report.json").is_file()

    def test_invalid_score(self):
        with pytest.raises((ParameterError, ValueError)):
            Detection("s", (0, 0, 1, 1), 0, 1.5)


class TestPseudoQuality:
    def test_medians(self, fixture_scene):
        recs = [
            {"round": 0, "scene_id": "f", "object_id": 0, "theta_coarse": [12, 10, 10, 10], "theta_refined": [10, 10, 10, 10]},
            {"round": 0, "scene_id": "f", "object_id": 1, "theta_coarse": [40, 10, 10, 10], "theta_refined": [40, 10, 10, 10]},
            {"round": 1, "scene_id": "f", "object_id": None, "theta_coarse": [0, 0, 1, 1], "theta_refined": [0, 0, 1, 1]},
        ]
        rounds, skipped = pseudo_quality(recs, [fixture_scene])
        assert skipped == 1 and len(rounds) == 1
        np.testing.assert_allclose(rounds[0].median_refined, 1.0)
        np.testing.assert_allclose(rounds[0].median_coarse, (1 + 80 / 120) / 2)
