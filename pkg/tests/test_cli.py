import json
import time

import pytest

from pointsup.cli import main
from pointsup.eval import save_detections
from pointsup.pipeline import read_metrics

SMALL = ["--set", "n_train_scenes=2", "--set", "n_eval_scenes=2", "--set", "scene_size=64", "--set", "iterations=40", "--set", "n_neg=20"]


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    t0 = time.perf_counter()
    assert main(["run", "--seed", "1", "--out", str(out), *SMALL]) == 0
    return out, time.perf_counter() - t0


class TestRun:
    def test_artifacts(self, small_run):
        out, elapsed = small_run
        assert elapsed < 60
        for name in ("config.json", "checkpoint.json", "evolution.jsonl", "metrics.csv"):
            assert (out / name).is_file()
        config, rows = read_metrics(out / "metrics.csv")
        assert config["seed"] == 1 and "eval/mAP" in rows

    def test_byte_identical_rerun(self, small_run, tmp_path):
        out, _ = small_run
        assert main(["run", "--seed", "1", "--out", str(tmp_path), *SMALL]) == 0
        for name in ("metrics.csv", "evolution.jsonl", "checkpoint.json"):
            assert (tmp_path / name).read_bytes() == (out / name).read_bytes()

    def test_invalid_config_exit_code(self, tmp_path, capsys):
        assert main(["run", "--out", str(tmp_path), "--set", "m=2"]) == 1
        assert "'m'" in capsys.readouterr().err
        assert main(["run", "--out", str(tmp_path), "--config", str(tmp_path / "missing.json")]) == 1

    def test_obb_training_rejected(self, tmp_path):
        assert main(["run", "--out", str(tmp_path), *SMALL, "--set", "task=obb"]) == 1


class TestData:
    def test_gen_points_deterministic(self, tmp_path):
        ds = tmp_path / "d.json"
        assert main(["gen-scenes", "--n", "3", "--seed", "2", "--out", str(ds), "--set", "scene_size=64"]) == 0
        assert main(["gen-points", "--dataset", str(ds), "--m", "0.5", "--seed", "4", "--out", str(tmp_path / "a.json")]) == 0
        assert main(["gen-points", "--dataset", str(ds), "--m", "0.5", "--seed", "4", "--out", str(tmp_path / "b.json")]) == 0
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        assert main(["gen-points", "--dataset", str(ds), "--m", "1.5", "--out", str(tmp_path / "c.json")]) == 1

    def test_eval_command(self, tmp_path, capsys):
        ds = tmp_path / "d.json"
        main(["gen-scenes", "--n", "1", "--seed", "0", "--out", str(ds), "--set", "scene_size=64"])
        scene = json.loads(ds.read_text())
        classes = scene["classes"]
        assert main(["eval", "--detections", str(tmp_path / "none.json"), "--dataset", str(ds), "--out", str(tmp_path / "r")]) == 1
        save_detections([], classes, tmp_path / "empty.json")
        assert main(["eval", "--detections", str(tmp_path / "empty.json"), "--dataset", str(ds), "--out", str(tmp_path / "r")]) == 0
        assert "mAP@0.25 = 0.0000" in capsys.readouterr().out
        assert (tmp_path / "r" / "report.csv").is_file()


class TestReportAndGradcheck:
    def test_single_run_row(self, small_run, tmp_path, capsys):
        out, _ = small_run
        assert main(["report", str(out), "--out", str(tmp_path)]) == 0
        lines = (tmp_path / "robustness.csv").read_text().splitlines()
        assert len(lines) == 2 and lines[0].startswith("run,m,beta")

    def test_missing_run(self, tmp_path, capsys):
        assert main(["report", str(tmp_path / "nope")]) == 1
        assert "missing run file" in capsys.readouterr().err

    def test_gradcheck(self, capsys):
        assert main(["gradcheck", "--cases", "5"]) == 0
        assert capsys.readouterr().out.count("PASS") == 5
