"""Synthetic scene oracle.

Boxes and vertical cylinders moving along parametric trajectories are ray-cast into
LiDAR scans and depth frames; dynamic-class objects also produce 2D detections.
Ground truth is exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from .dataset_io import DatasetWriter, GtBox, GtLabel, SensorRig
from .depth_detect import DepthFrame, pixel_rays
from .geometry import AABB3, Box2D, CameraModel, Pose, project_to_image

NO_HIT = -2
FLOOR_ID = -1

_STREAM_LIDAR, _STREAM_DEPTH, _STREAM_DET = 1, 2, 3


# --- trajectories ----------------------------------------------------------------


@dataclass
class Trajectory:
    """Position of an object's box centre over time.

    ``kind`` is ``static`` (``points[0]``), ``waypoints`` (rows ``[t, x, y, z]``,
    piecewise linear, clamped outside the time range) or ``const_acc``
    (``points = [p0, v0, a]``).
    """

    kind: Literal["static", "waypoints", "const_acc"]
    points: np.ndarray

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        width = {"static": 3, "waypoints": 4, "const_acc": 3}[self.kind]
        if self.points.shape[1] != width:
            raise ValueError(f"{self.kind} trajectory rows need {width} values")
        if self.kind == "waypoints" and np.any(np.diff(self.points[:, 0]) <= 0):
            raise ValueError("waypoint times must increase")

    @classmethod
    def static(cls, position) -> Trajectory:
        return cls("static", [position])

    @classmethod
    def waypoints(cls, rows) -> Trajectory:
        return cls("waypoints", rows)

    @classmethod
    def const_acc(cls, p0, v0, a) -> Trajectory:
        return cls("const_acc", [p0, v0, a])

    def covers(self, duration: float) -> bool:
        if self.kind != "waypoints":
            return True
        return self.points[0, 0] <= 0.0 and self.points[-1, 0] >= duration

    def position(self, t: float) -> np.ndarray:
        if self.kind == "static":
            return self.points[0].copy()
        if self.kind == "const_acc":
            p0, v0, a = self.points
            return p0 + v0 * t + 0.5 * a * t * t
        ts = self.points[:, 0]
        return np.array([np.interp(t, ts, self.points[:, k]) for k in (1, 2, 3)])

    def velocity(self, t: float) -> np.ndarray:
        if self.kind == "static":
            return np.zeros(3)
        if self.kind == "const_acc":
            _, v0, a = self.points
            return v0 + a * t
        ts = self.points[:, 0]
        if t < ts[0] or t >= ts[-1]:
            return np.zeros(3)
        k = int(np.searchsorted(ts, t, side="right")) - 1
        return (self.points[k + 1, 1:] - self.points[k, 1:]) / (ts[k + 1] - ts[k])

    def to_dict(self) -> dict:
        return {"kind": self.kind, "points": self.points.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> Trajectory:
        return cls(d["kind"], d["points"])


@dataclass
class SceneObject:
    shape: Literal["box", "cylinder"]
    size: np.ndarray  # (sx, sy, sz); a cylinder uses sx as diameter
    trajectory: Trajectory
    label: str = "object"

    def __post_init__(self):
        self.size = np.asarray(self.size, dtype=float).reshape(3)
        if self.shape not in ("box", "cylinder"):
            raise ValueError(f"unknown shape {self.shape!r}")
        if np.any(self.size <= 0):
            raise ValueError("object size must be positive")

    def box_at(self, t: float) -> AABB3:
        size = self.size if self.shape == "box" else np.array([self.size[0], self.size[0], self.size[2]])
        return AABB3(self.trajectory.position(t), size)

    def to_dict(self) -> dict:
        return {"shape": self.shape, "size": self.size.tolist(), "label": self.label, "trajectory": self.trajectory.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> SceneObject:
        return cls(d["shape"], d["size"], Trajectory.from_dict(d["trajectory"]), d.get("label", "object"))


@dataclass
class LidarModel:
    channels: int = 64
    fov_v: tuple[float, float] = (-30.0, 20.0)  # degrees
    azimuth_res: float = 0.25  # degrees
    max_range: float = 20.0
    noise_sigma: float = 0.01
    extrinsic: Pose = field(default_factory=lambda: Pose(0.0, np.array([0.0, 0.0, 0.2])))

    def directions(self) -> np.ndarray:
        el = np.deg2rad(np.linspace(self.fov_v[0], self.fov_v[1], self.channels))
        az = np.deg2rad(np.arange(0.0, 360.0, self.azimuth_res))
        ee, aa = np.meshgrid(el, az, indexing="ij")
        return np.stack([np.cos(ee) * np.cos(aa), np.cos(ee) * np.sin(aa), np.sin(ee)], axis=-1).reshape(-1, 3)


@dataclass
class DetectorModel:
    dropout: float = 0.0
    jitter_px: float = 0.0
    labels: tuple[str, ...] = ("person",)
    min_visible_px: int = 30
    score: float = 0.9


@dataclass
class SceneSpec:
    duration: float
    rate: float
    statics: list[SceneObject] = field(default_factory=list)
    dynamics: list[SceneObject] = field(default_factory=list)
    robot_trajectory: Trajectory = field(default_factory=lambda: Trajectory.static([0.0, 0.0, 0.8]))
    robot_yaw: float = 0.0
    lidar: LidarModel = field(default_factory=LidarModel)
    camera: CameraModel = field(default_factory=lambda: CameraModel.forward_facing(220.0, 220.0, 160.0, 120.0, 320, 240, (0.1, 0.0, 0.0)))
    depth_noise_sigma: float = 0.0
    detector: DetectorModel = field(default_factory=DetectorModel)
    floor: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.rate <= 0 or self.duration <= 0:
            raise ValueError("rate and duration must be positive")
        for obj in self.objects + [SceneObject("box", [1, 1, 1], self.robot_trajectory)]:
            if not obj.trajectory.covers(self.duration):
                raise ValueError("every trajectory must cover the full scene duration")

    @property
    def objects(self) -> list[SceneObject]:
        return self.statics + self.dynamics

    @property
    def stamps(self) -> np.ndarray:
        n = int(np.floor(self.duration * self.rate + 1e-9))
        return np.arange(n) / self.rate

    @property
    def sensors(self) -> SensorRig:
        return SensorRig(self.camera, self.lidar.extrinsic)

    def body_pose(self, t: float) -> Pose:
        p = self.robot_trajectory.position(t)
        return Pose.from_xyz_yaw(*p, yaw=self.robot_yaw, t=t)

    # JSON schema ---------------------------------------------------------------
    def to_dict(self) -> dict:
        from .dataset_io import camera_to_dict, pose_to_dict

        lid = self.lidar
        return {
            "duration": self.duration,
            "rate": self.rate,
            "seed": self.seed,
            "floor": self.floor,
            "statics": [o.to_dict() for o in self.statics],
            "dynamics": [o.to_dict() for o in self.dynamics],
            "robot": {"trajectory": self.robot_trajectory.to_dict(), "yaw": self.robot_yaw},
            "lidar": {
                "channels": lid.channels, "fov_v": list(lid.fov_v), "azimuth_res": lid.azimuth_res,
                "max_range": lid.max_range, "noise_sigma": lid.noise_sigma, "extrinsic": pose_to_dict(lid.extrinsic),
            },
            "camera": {**camera_to_dict(self.camera), "noise_sigma": self.depth_noise_sigma},
            "detector": {
                "dropout": self.detector.dropout, "jitter_px": self.detector.jitter_px,
                "labels": list(self.detector.labels), "min_visible_px": self.detector.min_visible_px,
                "score": self.detector.score,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> SceneSpec:
        from .dataset_io import camera_from_dict, pose_from_dict

        lid = dict(d.get("lidar", {}))
        if "extrinsic" in lid:
            lid["extrinsic"] = pose_from_dict(lid["extrinsic"])
        if "fov_v" in lid:
            lid["fov_v"] = tuple(lid["fov_v"])
        kw = {}
        if "camera" in d:
            cam = dict(d["camera"])
            kw["depth_noise_sigma"] = float(cam.pop("noise_sigma", 0.0))
            kw["camera"] = camera_from_dict(cam)
        if "robot" in d:
            kw["robot_trajectory"] = Trajectory.from_dict(d["robot"]["trajectory"])
            kw["robot_yaw"] = float(d["robot"].get("yaw", 0.0))
        det = dict(d.get("detector", {}))
        if "labels" in det:
            det["labels"] = tuple(det["labels"])
        return cls(
            duration=float(d["duration"]),
            rate=float(d["rate"]),
            statics=[SceneObject.from_dict(o) for o in d.get("statics", [])],
            dynamics=[SceneObject.from_dict(o) for o in d.get("dynamics", [])],
            lidar=LidarModel(**lid),
            detector=DetectorModel(**det),
            floor=bool(d.get("floor", False)),
            seed=int(d.get("seed", 0)),
            **kw,
        )

    @classmethod
    def load(cls, path) -> SceneSpec:
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)


# --- ray casting -----------------------------------------------------------------


def ray_box(origin: np.ndarray, dirs: np.ndarray, box: AABB3) -> np.ndarray:
    """Entry parameter of each ray into the box (``inf`` on miss or origin inside)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (box.min - origin) * inv
        t1 = (box.max - origin) * inv
    t0 = np.where(np.isnan(t0), -np.inf, t0)
    t1 = np.where(np.isnan(t1), np.inf, t1)
    near = np.minimum(t0, t1).max(axis=1)
    far = np.maximum(t0, t1).min(axis=1)
    hit = (near <= far) & (near > 0)
    return np.where(hit, near, np.inf)


def ray_cylinder(origin: np.ndarray, dirs: np.ndarray, center: np.ndarray, radius: float, height: float) -> np.ndarray:
    """First hit of each ray with a vertical closed cylinder centred at ``center``."""
    z0, z1 = center[2] - height / 2, center[2] + height / 2
    ox, oy = origin[0] - center[0], origin[1] - center[1]
    dx, dy, dz = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    a = dx * dx + dy * dy
    b = 2 * (ox * dx + oy * dy)
    c = ox * ox + oy * oy - radius * radius
    disc = b * b - 4 * a * c
    best = np.full(len(dirs), np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        ts = (-b - np.sqrt(disc)) / (2 * a)
        z = origin[2] + ts * dz
        side = (disc >= 0) & (a > 0) & (ts > 0) & (z >= z0) & (z <= z1)
        best = np.where(side, ts, best)
        for zc in (z0, z1):
            tc = (zc - origin[2]) / dz
            px, py = ox + tc * dx, oy + tc * dy
            cap = (dz != 0) & (tc > 0) & (px * px + py * py <= radius * radius)
            best = np.where(cap & (tc < best), tc, best)
    return best


def cast(origin: np.ndarray, dirs: np.ndarray, objects: list[SceneObject], t: float, floor: bool) -> tuple[np.ndarray, np.ndarray]:
    """Nearest hit parameter and object index per ray (``NO_HIT`` / ``FLOOR_ID`` codes)."""
    best = np.full(len(dirs), np.inf)
    ids = np.full(len(dirs), NO_HIT)
    norms = np.linalg.norm(dirs, axis=1)
    for k, obj in enumerate(objects):
        box = obj.box_at(t)
        # cull rays that miss the bounding sphere before the exact test
        v = box.center - origin
        radius = 0.5 * np.linalg.norm(box.size)
        along = dirs @ v / norms
        perp2 = v @ v - along**2
        cand = np.flatnonzero((perp2 <= radius**2) & (along >= -radius))
        if len(cand) == 0:
            continue
        if obj.shape == "box":
            th = ray_box(origin, dirs[cand], box)
        else:
            th = ray_cylinder(origin, dirs[cand], box.center, box.size[0] / 2, box.size[2])
        closer = th < best[cand]
        best[cand[closer]] = th[closer]
        ids[cand[closer]] = k
    if floor:
        with np.errstate(divide="ignore", invalid="ignore"):
            tf = np.where(dirs[:, 2] < 0, -origin[2] / dirs[:, 2], np.inf)
        closer = (tf > 0) & (tf < best)
        best = np.where(closer, tf, best)
        ids = np.where(closer, FLOOR_ID, ids)
    return best, ids


def _frame_rng(scene: SceneSpec, t: float, stream: int, seed: int | None) -> np.random.Generator:
    frame = int(round(t * scene.rate))
    return np.random.default_rng([scene.seed if seed is None else seed, frame, stream])


def render_lidar(scene: SceneSpec, t: float, seed: int | None = None) -> np.ndarray:
    """One 360-degree scan in the LiDAR frame (noisy ranges, hits beyond max_range dropped)."""
    lid = scene.lidar
    sensor = scene.body_pose(t).compose(lid.extrinsic)
    dirs_s = lid.directions()
    dirs_w = dirs_s @ sensor.rotation.T
    rng, _ = cast(sensor.position, dirs_w, scene.objects, t, scene.floor)
    hit = np.isfinite(rng) & (rng <= lid.max_range)
    r = rng[hit]
    if lid.noise_sigma > 0:
        r = r + _frame_rng(scene, t, _STREAM_LIDAR, seed).normal(0.0, lid.noise_sigma, len(r))
    return dirs_s[hit] * r[:, None]


def render_depth_ids(scene: SceneSpec, t: float, seed: int | None = None) -> tuple[DepthFrame, np.ndarray]:
    """Depth frame (raw units) plus the per-pixel object index of the nearest hit."""
    cam = scene.camera
    cam_pose = cam.world_pose(scene.body_pose(t))
    rays = pixel_rays(cam).reshape(-1, 3)
    depth, ids = cast(cam_pose.position, rays @ cam_pose.rotation.T, scene.objects, t, scene.floor)
    if scene.depth_noise_sigma > 0:
        depth = depth + _frame_rng(scene, t, _STREAM_DEPTH, seed).normal(0.0, scene.depth_noise_sigma, len(depth))
    ok = np.isfinite(depth) & (depth >= cam.depth_min) & (depth <= cam.depth_max)
    raw = np.zeros(len(depth), dtype=np.uint16)
    raw[ok] = np.clip(np.round(depth[ok] / cam.depth_scale), 1, 65535).astype(np.uint16)
    ids = np.where(ok | np.isfinite(depth), ids, NO_HIT)
    shape = (cam.height, cam.width)
    return DepthFrame(raw.reshape(shape), cam, t), ids.reshape(shape)


def render_depth(scene: SceneSpec, t: float, seed: int | None = None) -> DepthFrame:
    return render_depth_ids(scene, t, seed)[0]


def is_dynamic(obj: SceneObject, t: float) -> bool:
    return bool(np.linalg.norm(obj.trajectory.velocity(t)) > 1e-6)


def render_2d_detections(scene: SceneSpec, t: float, ids: np.ndarray | None = None, seed: int | None = None) -> list[Box2D]:
    """Projected boxes of visible detector-class objects, with dropout and edge jitter."""
    det = scene.detector
    if ids is None:
        ids = render_depth_ids(scene, t, seed)[1]
    rng = _frame_rng(scene, t, _STREAM_DET, seed)
    pose = scene.body_pose(t)
    out = []
    for k, obj in enumerate(scene.objects):
        if obj.label not in det.labels:
            continue
        # draws happen for every candidate so one object's visibility never shifts another's noise
        drop = rng.random() < det.dropout
        jitter = rng.normal(0.0, det.jitter_px, 4) if det.jitter_px > 0 else np.zeros(4)
        if np.count_nonzero(ids == k) < det.min_visible_px or drop:
            continue
        box = project_to_image(obj.box_at(t), scene.camera, pose)
        if box is None:
            continue
        u0, v0, u1, v1 = np.array(box.as_tuple()) + jitter
        noisy = Box2D(float(min(u0, u1 - 1)), float(min(v0, v1 - 1)), float(u1), float(v1), obj.label, det.score)
        clamped = noisy.clamped(scene.camera.width, scene.camera.height)
        if clamped is not None:
            out.append(clamped)
    return out


def ground_truth_frame(scene: SceneSpec, t: float) -> GtLabel:
    return GtLabel(float(t), [GtBox(o.box_at(t), k, is_dynamic(o, t)) for k, o in enumerate(scene.objects)])


def export_ground_truth(scene: SceneSpec) -> list[GtLabel]:
    return [ground_truth_frame(scene, float(t)) for t in scene.stamps]


def write_dataset(scene: SceneSpec, out_dir, seed: int | None = None, binary_pcd: bool = True) -> Path:
    """Render every frame and write a dataset directory readable by :class:`~dynobs.dataset_io.Dataset`."""
    out = Path(out_dir)
    writer = DatasetWriter(out, scene.sensors, binary_pcd)
    for t in scene.stamps:
        t = float(t)
        depth, ids = render_depth_ids(scene, t, seed)
        writer.add(t, scene.body_pose(t), render_lidar(scene, t, seed), depth.values, render_2d_detections(scene, t, ids, seed))
    writer.close(export_ground_truth(scene))
    scene.save(out / "scene.json")
    return out


def render_frame(scene: SceneSpec, t: float, index: int = 0, seed: int | None = None):
    """One in-memory :class:`~dynobs.dataset_io.FrameBundle`, as ``load_frame`` would return it."""
    from .dataset_io import FrameBundle

    depth, ids = render_depth_ids(scene, t, seed)
    return FrameBundle(float(t), scene.body_pose(t), render_lidar(scene, t, seed), depth, render_2d_detections(scene, t, ids, seed), float(t), float(t), index)


def render_frames(scene: SceneSpec, seed: int | None = None):
    for k, t in enumerate(scene.stamps):
        yield render_frame(scene, float(t), k, seed)
