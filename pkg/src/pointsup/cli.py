"""
Command-line interface.

Subcommands: ``gen-scenes``, ``gen-points``, ``run``, ``eval``,
``gradcheck`` and ``report``.  Exit codes: 0 on success, 1 for invalid input
(bad config values, missing files), 2 when an internal invariant fails.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .config import RunConfig
from .errors import InvariantError, ParameterError
from .eval import evaluate, load_detections, write_report
from .gradcheck import format_table, run_all
from .pipeline import (
    default_classes,
    read_metrics,
    run,
    seed_streams,
    version_string,
    write_artifacts,
)
from .scenes import Dataset, generate_scenes, save_points, simulate_points

logger = logging.getLogger("pointsup")

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_INVARIANT = 2


def load_config(path: Optional[str], seed: Optional[int], overrides: Sequence[str]) -> RunConfig:
    cfg = RunConfig.load(path) if path else RunConfig()
    overrides = list(overrides or [])
    if seed is not None:
        overrides.append(f"seed={seed}")
    return cfg.with_overrides(overrides)


def cmd_gen_scenes(args) -> int:
    cfg = load_config(args.config, args.seed, args.set)
    rng = seed_streams(cfg.seed)["scenes"]
    scenes = generate_scenes(
        args.n if args.n is not None else cfg.n_train_scenes,
        rng,
        size=(cfg.scene_size, cfg.scene_size),
        n_objects=tuple(cfg.objects_per_scene),
        object_size=tuple(cfg.object_size),
        n_classes=cfg.n_classes,
        task=cfg.task,
        prefix=args.prefix,
    )
    Dataset(cfg.task, default_classes(cfg.n_classes), scenes).save(args.out)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return EXIT_OK


def cmd_gen_points(args) -> int:
    """Simulate one annotated point per object of a dataset file."""
    ds = Dataset.load(args.dataset)
    seed = args.seed if args.seed is not None else 0
    points = simulate_points(ds.scenes, args.m, seed_streams(seed)["annotation"])
    save_points(points, ds.classes, args.out)
    print(f"wrote {len(points)} points to {args.out}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = load_config(args.config, args.seed, args.set)
    result = run(cfg)
    paths = write_artifacts(result, args.out)
    print(f"mAP@{cfg.eval_iou:g} = {result.report.mAP:.4f}")
    for name, path in paths.items():
        print(f"{name}: {path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ds = Dataset.load(args.dataset)
    dets = load_detections(args.detections, ds.classes)
    report = evaluate(dets, ds.scenes, args.thr, n_classes=len(ds.classes))
    write_report(report, args.out, ds.classes, header=[f"version: {version_string()}", f"iou_thr: {args.thr}"])
    print(f"mAP@{args.thr:g} = {report.mAP:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rows = run_all(seed=args.seed if args.seed is not None else 0, n=args.cases)
    print(format_table(rows))
    return EXIT_OK if all(r.passed for r in rows) else EXIT_INVARIANT


REPORT_COLUMNS = ("mAP", "AP_vt", "AP_t", "AP_s", "AP_m")


def robustness_rows(run_dirs: Sequence[str]) -> List[dict]:
    rows = []
    for d in run_dirs:
        path = Path(d) / "metrics.csv"
        if not path.is_file():
            raise ParameterError(f"missing run file: {path}")
        config, metrics = read_metrics(path)
        if config is None:
            raise ParameterError(f"{path} has no embedded config")
        row = {"run": str(d), "m": config["m"], "beta": config["beta"]}
        for col in REPORT_COLUMNS:
            row[col] = metrics.get(f"eval/{col}", "")
        rows.append(row)
    rows.sort(key=lambda r: (r["beta"], r["m"], r["run"]))
    return rows


def format_robustness(rows: Sequence[dict]) -> str:
    head = f"{'run':<28}{'m':>6}{'beta':>6}" + "".join(f"{c:>9}" for c in REPORT_COLUMNS)
    lines = [head]
    for r in rows:
        cells = "".join(f"{(float(r[c]) * 100 if r[c] != '' else float('nan')):>9.1f}" for c in REPORT_COLUMNS)
        lines.append(f"{Path(r['run']).name:<28}{r['m']:>6.2f}{r['beta']:>6.2f}{cells}")
    return "\n".join(lines)


def cmd_report(args) -> int:
    rows = robustness_rows(args.runs)
    table = format_robustness(rows)
    print(table)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["run", "m", "beta", *REPORT_COLUMNS], lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        (out / "robustness.csv").write_text(buf.getvalue())
        (out / "robustness.txt").write_text(table + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pointsup", description="Point-supervised tiny-object detection on synthetic scenes.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="root seed (overrides the config)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config field")
        p.add_argument("--out", required=out_required, help="output path")

    p = sub.add_parser("gen-scenes", help="generate a synthetic dataset file")
    common(p)
    p.add_argument("--n", type=int, help="number of scenes (default: n_train_scenes)")
    p.add_argument("--prefix", default="s")
    p.set_defaults(func=cmd_gen_scenes)

    p = sub.add_parser("gen-points", help="simulate point annotations for a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--m", type=float, default=1.0, help="point-noise level in [0, 1]")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_points)

    p = sub.add_parser("run", help="train both phases and evaluate")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="evaluate a detections file")
    p.add_argument("--detections", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--thr", type=float, default=0.25)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss gradient")
    p.add_argument("--seed", type=int)
    p.add_argument("--cases", type=int, default=100)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="summarize runs across point-noise levels")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InvariantError as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (ParameterError, ValueError, KeyError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
