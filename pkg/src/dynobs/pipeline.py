"""Per-frame detect -> fuse -> track pipeline and its configuration."""

from __future__ import annotations

import dataclasses
import json
import re
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset_io import Dataset, FrameBundle, ResultFrame, ResultObstacle, SensorRig
from .depth_detect import DepthDetectConfig, ensemble_match, preprocess_depth, udepth_detect
from .fusion import FusionConfig, fuse_frame
from .lidar_detect import LidarConfig, Obstacle3D, cluster_obstacles, preprocess_scan
from .tracking import TrackConfig, Tracker

STAGES = ("lidar", "depth", "fusion", "tracking")


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    lidar: LidarConfig = field(default_factory=LidarConfig)
    depth: DepthDetectConfig = field(default_factory=DepthDetectConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    tracking: TrackConfig = field(default_factory=TrackConfig)
    seed: int = 0
    # which inputs feed the pipeline; switching one off gives the ablation variants
    use_lidar: bool = True
    use_depth: bool = True
    use_color: bool = True
    # "passthrough": a missing stream lets the other pass unfused; "skip": drop the frame
    degraded_policy: str = "passthrough"

    def __post_init__(self):
        if self.degraded_policy not in ("passthrough", "skip"):
            raise ValueError("degraded_policy must be 'passthrough' or 'skip'")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {"lidar": LidarConfig, "depth": DepthDetectConfig, "fusion": FusionConfig, "tracking": TrackConfig}


def _line_of(text: str, key: str) -> int | None:
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _config_error(path, text: str, key: str, msg: str) -> ConfigError:
    line = _line_of(text, key)
    where = f"{path}:{line}" if line else str(path)
    return ConfigError(f"{where}: {msg}")


def config_from_dict(data: dict, path="<config>", text: str = "") -> PipelineConfig:
    """Build a config, rejecting unknown keys; messages name the offending line when ``text`` is given."""
    top = {f.name for f in dataclasses.fields(PipelineConfig)}
    kwargs = {}
    for key, value in data.items():
        if key not in top:
            raise _config_error(path, text, key, f"unknown key {key!r}")
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise _config_error(path, text, key, f"section {key!r} must be an object")
            known = {f.name for f in dataclasses.fields(_SECTIONS[key])}
            for sub in value:
                if sub not in known:
                    raise _config_error(path, text, sub, f"unknown key {key}.{sub}")
            try:
                kwargs[key] = _SECTIONS[key](**value)
            except (TypeError, ValueError) as exc:
                raise _config_error(path, text, key, f"invalid {key} section: {exc}") from None
        else:
            kwargs[key] = value
    try:
        return PipelineConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def load_config(path) -> PipelineConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}:1: top level must be an object")
    return config_from_dict(data, path, text)


@dataclass
class FrameOutput:
    result: ResultFrame
    detections: dict[str, list[Obstacle3D]]
    timings: dict[str, float]


class Pipeline:
    """Stateful replay pipeline; call :meth:`process` once per frame in stamp order."""

    def __init__(self, sensors: SensorRig, cfg: PipelineConfig | None = None):
        self.sensors = sensors
        self.cfg = cfg or PipelineConfig()
        self.tracker = Tracker(self.cfg.tracking)

    def detect(self, frame: FrameBundle) -> tuple[dict, dict, np.ndarray]:
        cfg = self.cfg
        body = frame.odom
        timings = {}
        clouds = []
        dets: dict[str, list[Obstacle3D] | None] = {"lidar": None, "depth": None}

        t0 = time.perf_counter()
        if cfg.use_lidar and frame.lidar is not None:
            sensor_pose = body.compose(self.sensors.lidar_extrinsic)
            rng = np.random.default_rng([cfg.seed, frame.index])
            cloud = preprocess_scan(frame.lidar, sensor_pose, cfg.lidar, rng)
            dets["lidar"] = cluster_obstacles(cloud, cfg.lidar.dbscan_eps, cfg.lidar.dbscan_min_pts, "lidar", frame.lidar_stamp)
            clouds.append(cloud)
        timings["lidar"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        if cfg.use_depth and frame.depth is not None:
            cloud = preprocess_depth(frame.depth, body, cfg.depth)
            by_dbscan = cluster_obstacles(cloud, cfg.depth.dbscan_eps, cfg.depth.dbscan_min_pts, "visual", frame.depth.stamp)
            by_udepth = udepth_detect(frame.depth, body, cfg.depth)
            dets["depth"] = ensemble_match(by_dbscan, by_udepth, cfg.depth.ensemble_iou_thresh)
            clouds.append(cloud)
        timings["depth"] = time.perf_counter() - t0
        scene_cloud = np.vstack(clouds) if clouds else np.zeros((0, 3))
        return dets, timings, scene_cloud

    def process(self, frame: FrameBundle) -> FrameOutput | None:
        cfg, cam = self.cfg, self.sensors.camera
        dets, timings, scene_cloud = self.detect(frame)
        det2d = frame.det2d if cfg.use_color else []

        t0 = time.perf_counter()
        fused = fuse_frame(dets["lidar"], dets["depth"], det2d, cam, frame.odom, cfg.fusion, frame.lidar_stamp, frame.depth_stamp)
        timings["fusion"] = time.perf_counter() - t0
        if fused.degraded and cfg.degraded_policy == "skip" and (dets["lidar"] is not None or dets["depth"] is not None):
            return None

        t0 = time.perf_counter()
        tracked = self.tracker.step(fused.obstacles, frame.stamp, scene_cloud, det2d, cam, frame.odom)
        timings["tracking"] = time.perf_counter() - t0

        obstacles = [ResultObstacle(o.id, o.box.center, o.box.size, o.velocity, o.motion_class, o.source) for o in tracked]
        result = ResultFrame(frame.stamp, obstacles, fused.degraded)
        all_dets = {k: v for k, v in dets.items() if v is not None}
        all_dets["fused"] = fused.obstacles
        return FrameOutput(result, all_dets, timings)


def run_dataset(dataset: Dataset, cfg: PipelineConfig | None = None, skip_bad: bool = False):
    """Replay every frame; returns result frames and per-stage latency samples (seconds)."""
    pipe = Pipeline(dataset.sensors, cfg)
    results, timings = [], {s: [] for s in STAGES}
    for frame in dataset.frames(skip_bad):
        out = pipe.process(frame)
        if out is None:
            continue
        results.append(out.result)
        for s in STAGES:
            timings[s].append(out.timings.get(s, 0.0))
    return results, timings


def latency_table(timings: dict[str, list[float]]) -> str:
    lines = [f"{'module':<12}{'mean (ms)':>12}{'std (ms)':>12}"]
    total = np.zeros(len(next(iter(timings.values()), [])))
    for stage in STAGES:
        ms = np.asarray(timings.get(stage, []), dtype=float) * 1e3
        if len(ms) == len(total):
            total = total + ms
        lines.append(f"{stage:<12}{(ms.mean() if len(ms) else 0):>12.2f}{(ms.std() if len(ms) else 0):>12.2f}")
    lines.append(f"{'total':<12}{(total.mean() if len(total) else 0):>12.2f}{(total.std() if len(total) else 0):>12.2f}")
    return "\n".join(lines)
