"""Command-line entry point: ``dynobs {track,detect,synth,eval}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .dataset_io import Dataset, ResultFrame, ResultObstacle, load_gt, load_results, write_results
from .errors import FrameLoadError, FrameSkipError
from .evaluation import evaluate, iou_grid
from .fusion import fuse_frame
from .pipeline import ConfigError, Pipeline, PipelineConfig, latency_table, load_config, run_dataset
from .synth import SceneSpec, write_dataset

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("dynobs")


class UsageError(Exception):
    pass


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _dataset(path) -> Dataset:
    root = Path(path)
    if not (root / "manifest.jsonl").is_file():
        raise UsageError(f"{root}: no manifest.jsonl")
    return Dataset(root)


def _out_path(args, default: str) -> Path:
    out = Path(args.out or default)
    if not out.parent.exists():
        raise UsageError(f"output directory {out.parent} does not exist")
    return out


def cmd_track(args) -> int:
    cfg = _config(args)
    ds = _dataset(args.dataset)
    out = _out_path(args, "results.jsonl")
    results, timings = run_dataset(ds, cfg, args.skip_bad_frames)
    write_results(results, out)
    print(latency_table(timings))
    print(f"wrote {len(results)} frames to {out}")
    return EXIT_OK


def _as_result(stamp: float, obstacles) -> ResultFrame:
    zero = np.zeros(3)
    return ResultFrame(stamp, [ResultObstacle(k, o.box.center, o.box.size, zero, "unclassified", o.source) for k, o in enumerate(obstacles)])


def cmd_detect(args) -> int:
    """Run detection (and optionally fusion) only; obstacles are written unclassified."""
    cfg = _config(args)
    ds = _dataset(args.dataset)
    out = _out_path(args, f"detections_{args.stage}.jsonl")
    pipe = Pipeline(ds.sensors, cfg)
    frames = []
    for frame in ds.frames(args.skip_bad_frames):
        dets, _, _ = pipe.detect(frame)
        if args.stage == "fused":
            det2d = frame.det2d if cfg.use_color else []
            obs = fuse_frame(dets["lidar"], dets["depth"], det2d, ds.sensors.camera, frame.odom, cfg.fusion, frame.lidar_stamp, frame.depth_stamp).obstacles
        else:
            obs = dets[args.stage] or []
        frames.append(_as_result(frame.stamp, obs))
    write_results(frames, out)
    print(f"wrote {len(frames)} frames to {out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    try:
        scene = SceneSpec.load(args.scene)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"{args.scene}: {exc}") from None
    if args.seed is not None:
        scene.seed = args.seed
    out = write_dataset(scene, args.out)
    print(f"wrote {len(scene.stamps)} frames to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.iou_step <= 0 or args.iou_start > args.iou_end:
        raise UsageError("need --iou-step > 0 and --iou-start <= --iou-end")
    grid = iou_grid(args.iou_start, args.iou_end, args.iou_step)
    report = evaluate(load_results(args.results), load_gt(args.gt), grid, args.optimal)
    out = Path(args.out or "eval")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2)
    shown = [th for th in (0.3, 0.5, 0.7) if any(abs(th - g) < 1e-9 for g in grid)]
    report.write_table_csv(out / "table.csv", [min(grid, key=lambda g: abs(g - th)) for th in shown])
    report.write_curve_csv(out / "curve.csv")
    for th in shown:
        m = report.at(min(grid, key=lambda g: abs(g - th)))
        print(f"IoU {th:.1f}: precision {m.precision:.3f}  recall {m.recall:.3f}  F1 {m.f1:.3f}  pos.err {m.mean_pos_err:.3f} m")
    print(f"wrote report to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dynobs", description="LiDAR-visual dynamic obstacle detection and tracking")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_help):
        p.add_argument("dataset", help="dataset directory")
        p.add_argument("--config", help="JSON pipeline config")
        p.add_argument("--out", help=out_help)
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--skip-bad-frames", action="store_true", help="log and skip unreadable frames instead of failing")

    p = sub.add_parser("track", help="replay a dataset through detect -> fuse -> track")
    common(p, "results file (default results.jsonl)")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("detect", help="run a single detection stage")
    common(p, "detections file")
    p.add_argument("--stage", choices=("lidar", "depth", "fused"), default="fused")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("synth", help="render a synthetic dataset from a scene file")
    p.add_argument("scene", help="scene JSON")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="score results against ground truth over an IoU sweep")
    p.add_argument("results")
    p.add_argument("gt")
    p.add_argument("--out", help="report directory (default eval/)")
    p.add_argument("--iou-start", type=float, default=0.05)
    p.add_argument("--iou-end", type=float, default=0.95)
    p.add_argument("--iou-step", type=float, default=0.05)
    p.add_argument("--optimal", action="store_true", help="maximum matching instead of greedy")
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FrameLoadError, FrameSkipError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
