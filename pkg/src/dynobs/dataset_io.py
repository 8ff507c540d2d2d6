"""Dataset ingestion and result emission.

Dataset directory layout::

    sensors.json        camera model + LiDAR extrinsic (see ``docs/formats.md``)
    manifest.jsonl      one frame per line
    odometry.jsonl      body pose stream
    gt.jsonl            optional ground-truth labels
    lidar/*.pcd         scans in the LiDAR frame
    depth/*.png         16-bit depth, millimetres, 0 = invalid
    det2d/*.jsonl       2D detections, one box per line
"""

from __future__ import annotations

import bisect
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from .depth_detect import DepthFrame
from .errors import FrameLoadError, FrameSkipError
from .geometry import AABB3, Box2D, CameraModel, Pose

log = logging.getLogger(__name__)

ODOM_MAX_GAP = 0.02

# --- JSON-lines ------------------------------------------------------------------


def read_jsonl(path) -> list[dict]:
    """Parse one JSON object per line; errors carry the byte offset of the bad line."""
    path = Path(path)
    records, offset = [], 0
    with open(path, "rb") as fh:
        for raw in fh:
            line = raw.strip()
            if line:
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise FrameLoadError(path, offset + exc.pos, exc.msg) from None
                if not isinstance(rec, dict):
                    raise FrameLoadError(path, offset, "expected a JSON object per line")
                records.append(rec)
            offset += len(raw)
    return records


def write_jsonl(path, records) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, allow_nan=False) + "\n")


def _floats(values, n: int, what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float).reshape(-1)
    if arr.shape != (n,) or not np.all(np.isfinite(arr)):
        raise ValueError(f"{what}: expected {n} finite numbers, got {values!r}")
    return arr


# --- record codecs ---------------------------------------------------------------


def pose_to_dict(p: Pose) -> dict:
    return {"t": float(p.t), "position": p.position.tolist(), "orientation": p.orientation.tolist()}


def pose_from_dict(d: dict) -> Pose:
    return Pose(float(d.get("t", 0.0)), _floats(d["position"], 3, "position"), _floats(d["orientation"], 4, "orientation"))


def box2d_to_dict(b: Box2D) -> dict:
    return {"u_min": b.u_min, "v_min": b.v_min, "u_max": b.u_max, "v_max": b.v_max, "label": b.class_label, "score": b.score}


def box2d_from_dict(d: dict) -> Box2D:
    return Box2D(float(d["u_min"]), float(d["v_min"]), float(d["u_max"]), float(d["v_max"]), d.get("label"), d.get("score"))


def camera_to_dict(cam: CameraModel) -> dict:
    return {
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "width": cam.width, "height": cam.height,
        "extrinsic": pose_to_dict(cam.extrinsic),
        "depth_scale": cam.depth_scale, "depth_min": cam.depth_min, "depth_max": cam.depth_max,
    }


def camera_from_dict(d: dict) -> CameraModel:
    kw = dict(d)
    kw["extrinsic"] = pose_from_dict(kw["extrinsic"])
    return CameraModel(**kw)


@dataclass
class GtBox:
    box: AABB3
    track_id: int
    is_dynamic: bool


@dataclass
class GtLabel:
    stamp: float
    boxes: list[GtBox] = field(default_factory=list)

    def __post_init__(self):
        ids = [b.track_id for b in self.boxes]
        if len(ids) != len(set(ids)):
            raise ValueError(f"duplicate track ids in GT frame {self.stamp}")


def gt_to_dict(g: GtLabel) -> dict:
    return {
        "stamp": g.stamp,
        "boxes": [
            {"center": b.box.center.tolist(), "size": b.box.size.tolist(), "track_id": b.track_id, "is_dynamic": b.is_dynamic}
            for b in g.boxes
        ],
    }


def gt_from_dict(d: dict) -> GtLabel:
    boxes = [
        GtBox(AABB3(_floats(b["center"], 3, "center"), _floats(b["size"], 3, "size")), int(b["track_id"]), bool(b["is_dynamic"]))
        for b in d["boxes"]
    ]
    return GtLabel(float(d["stamp"]), boxes)


def write_gt(labels: list[GtLabel], path) -> None:
    write_jsonl(path, [gt_to_dict(g) for g in labels])


def load_gt(path) -> list[GtLabel]:
    return [_decode(path, i, gt_from_dict, rec) for i, rec in enumerate(read_jsonl(path))]


def _decode(path, index, fn, rec):
    try:
        return fn(rec)
    except (KeyError, TypeError, ValueError) as exc:
        raise FrameLoadError(path, None, f"record {index}: {exc}") from None


# --- results ---------------------------------------------------------------------

RESULT_FIELDS = ("id", "center", "size", "velocity", "motion_class", "source")


@dataclass
class ResultObstacle:
    id: int
    center: np.ndarray
    size: np.ndarray
    velocity: np.ndarray
    motion_class: str
    source: str

    @property
    def box(self) -> AABB3:
        return AABB3(self.center, self.size)

    def to_dict(self) -> dict:
        return {
            "id": int(self.id),
            "center": [float(v) for v in self.center],
            "size": [float(v) for v in self.size],
            "velocity": [float(v) for v in self.velocity],
            "motion_class": self.motion_class,
            "source": self.source,
        }


@dataclass
class ResultFrame:
    stamp: float
    obstacles: list[ResultObstacle] = field(default_factory=list)
    degraded: str | None = None

    def to_dict(self) -> dict:
        rec = {"stamp": float(self.stamp), "obstacles": [o.to_dict() for o in self.obstacles]}
        if self.degraded:
            rec["degraded"] = self.degraded
        return rec

    @classmethod
    def from_dict(cls, d: dict) -> ResultFrame:
        obs = [
            ResultObstacle(
                int(o["id"]),
                _floats(o["center"], 3, "center"),
                _floats(o["size"], 3, "size"),
                _floats(o["velocity"], 3, "velocity"),
                str(o["motion_class"]),
                str(o["source"]),
            )
            for o in d["obstacles"]
        ]
        return cls(float(d["stamp"]), obs, d.get("degraded"))


def write_results(frames: list[ResultFrame], path) -> None:
    """One line per frame; keys always in ``RESULT_FIELDS`` order."""
    write_jsonl(path, [f.to_dict() for f in frames])


def load_results(path) -> list[ResultFrame]:
    return [_decode(path, i, ResultFrame.from_dict, rec) for i, rec in enumerate(read_jsonl(path))]


# --- PCD -------------------------------------------------------------------------

_PCD_TYPES = {("F", 4): "<f4", ("F", 8): "<f8", ("I", 1): "<i1", ("I", 2): "<i2", ("I", 4): "<i4",
              ("U", 1): "<u1", ("U", 2): "<u2", ("U", 4): "<u4"}


def write_pcd(path, points, binary: bool = True) -> None:
    """Write x, y, z float32 points as PCD v0.7 (binary little-endian or ASCII)."""
    pts = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    header = (
        "# .PCD v0.7 - Point Cloud Data file format\nVERSION 0.7\nFIELDS x y z\nSIZE 4 4 4\nTYPE F F F\n"
        f"COUNT 1 1 1\nWIDTH {len(pts)}\nHEIGHT 1\nVIEWPOINT 0 0 0 1 0 0 0\nPOINTS {len(pts)}\n"
        f"DATA {'binary' if binary else 'ascii'}\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            fh.write(pts.astype("<f4").tobytes())
        else:
            for p in pts:
                # float64 repr of a float32 value parses back to the same float32
                fh.write(" ".join(repr(float(v)) for v in p).encode("ascii") + b"\n")


def read_pcd(path) -> np.ndarray:
    """Read the x, y, z fields of an ASCII or binary PCD file as float64 ``(N, 3)``.

    Non-finite coordinates are rejected.
    """
    path = Path(path)
    data = path.read_bytes()
    header: dict[str, list[str]] = {}
    offset = 0
    while True:
        end = data.find(b"\n", offset)
        if end < 0:
            raise FrameLoadError(path, offset, "truncated PCD header")
        line = data[offset:end].decode("ascii", errors="replace").strip()
        line_start, offset = offset, end + 1
        if not line or line.startswith("#"):
            continue
        key, *vals = line.split()
        header[key.upper()] = vals
        if key.upper() == "DATA":
            break
    try:
        fields = header["FIELDS"]
        sizes = [int(s) for s in header["SIZE"]]
        types = header["TYPE"]
        counts = [int(c) for c in header.get("COUNT", ["1"] * len(fields))]
        n = int(header["POINTS"][0])
        mode = header["DATA"][0].lower()
    except (KeyError, ValueError, IndexError) as exc:
        raise FrameLoadError(path, line_start, f"bad PCD header: {exc}") from None
    if not {"x", "y", "z"} <= set(fields):
        raise FrameLoadError(path, 0, "PCD lacks x/y/z fields")
    if any(c != 1 for f, c in zip(fields, counts) if f in "xyz"):
        raise FrameLoadError(path, 0, "x/y/z fields must have COUNT 1")

    if mode == "binary":
        try:
            dtype = np.dtype([(f"{f}_{k}", _PCD_TYPES[(t, s)], (c,)) for k, (f, s, t, c) in enumerate(zip(fields, sizes, types, counts))])
        except KeyError as exc:
            raise FrameLoadError(path, line_start, f"unsupported PCD field type {exc}") from None
        need = dtype.itemsize * n
        if len(data) - offset < need:
            raise FrameLoadError(path, offset, f"binary payload has {len(data) - offset} bytes, need {need}")
        rec = np.frombuffer(data, dtype=dtype, count=n, offset=offset)
        names = {f: f"{f}_{k}" for k, f in enumerate(fields)}
        pts = np.stack([rec[names[a]][:, 0].astype(float) for a in "xyz"], axis=1)
    elif mode == "ascii":
        col = {}
        pos = 0
        for f, c in zip(fields, counts):
            col[f] = pos
            pos += c
        rows = []
        for lineno, raw in enumerate(data[offset:].splitlines(keepends=True)):
            if not raw.strip():
                offset += len(raw)
                continue
            parts = raw.split()
            try:
                rows.append([float(parts[col[a]]) for a in "xyz"])
            except (ValueError, IndexError):
                raise FrameLoadError(path, offset, f"bad ASCII point row {lineno}") from None
            offset += len(raw)
        if len(rows) != n:
            raise FrameLoadError(path, len(data), f"expected {n} points, found {len(rows)}")
        pts = np.array(rows, dtype=float).reshape(-1, 3)
    else:
        raise FrameLoadError(path, line_start, f"unsupported PCD DATA mode {mode!r}")

    bad = ~np.all(np.isfinite(pts), axis=1)
    if np.any(bad):
        raise FrameLoadError(path, None, f"{int(bad.sum())} non-finite points (first index {int(np.argmax(bad))})")
    return pts


# --- depth PNG -------------------------------------------------------------------


def write_depth_png(path, raw: np.ndarray) -> None:
    arr = np.asarray(raw)
    if arr.ndim != 2:
        raise ValueError("depth image must be 2D")
    Image.fromarray(arr.astype(np.uint16)).save(path)


def read_depth_png(path) -> np.ndarray:
    """Raw 16-bit depth values; any other PNG bit depth is rejected."""
    try:
        with Image.open(path) as im:
            if im.mode not in ("I;16", "I;16B", "I;16L"):
                raise FrameLoadError(path, 0, f"expected a 16-bit single-channel PNG, got mode {im.mode!r}")
            return np.array(im, dtype=np.uint16)
    except OSError as exc:
        raise FrameLoadError(path, 0, f"cannot decode PNG: {exc}") from None


# --- sensors, odometry, manifest --------------------------------------------------


@dataclass
class SensorRig:
    camera: CameraModel
    lidar_extrinsic: Pose = field(default_factory=Pose)

    def to_dict(self) -> dict:
        return {"camera": camera_to_dict(self.camera), "lidar_extrinsic": pose_to_dict(self.lidar_extrinsic)}

    @classmethod
    def from_dict(cls, d: dict) -> SensorRig:
        return cls(camera_from_dict(d["camera"]), pose_from_dict(d.get("lidar_extrinsic", pose_to_dict(Pose()))))


def slerp(q0: np.ndarray, q1: np.ndarray, s: float) -> np.ndarray:
    d = float(np.dot(q0, q1))
    if d < 0:
        q1, d = -q1, -d
    if d > 0.9995:
        q = q0 + s * (q1 - q0)
    else:
        th = np.arccos(d)
        q = (np.sin((1 - s) * th) * q0 + np.sin(s * th) * q1) / np.sin(th)
    return q / np.linalg.norm(q)


class Odometry:
    """Pose stream with nearest-stamp lookup and linear / slerp interpolation."""

    def __init__(self, poses: list[Pose], max_gap: float = ODOM_MAX_GAP):
        self.poses = sorted(poses, key=lambda p: p.t)
        self.stamps = [p.t for p in self.poses]
        self.max_gap = max_gap

    def at(self, stamp: float) -> Pose:
        if not self.poses:
            raise FrameSkipError(f"no odometry for stamp {stamp:.6f}")
        k = bisect.bisect_left(self.stamps, stamp)
        before = self.poses[k - 1] if k > 0 else None
        after = self.poses[k] if k < len(self.poses) else None
        near = min((p for p in (before, after) if p is not None), key=lambda p: abs(p.t - stamp))
        if abs(near.t - stamp) > self.max_gap:
            raise FrameSkipError(f"nearest odometry is {abs(near.t - stamp):.3f}s from stamp {stamp:.6f}")
        if abs(near.t - stamp) < 1e-9 or before is None or after is None or after.t - before.t > 2 * self.max_gap:
            return Pose(stamp, near.position, near.orientation)
        s = (stamp - before.t) / (after.t - before.t)
        pos = (1 - s) * before.position + s * after.position
        return Pose(stamp, pos, slerp(before.orientation, after.orientation, s))


@dataclass
class FrameManifestEntry:
    stamp: float
    lidar_path: Path | None
    depth_path: Path | None
    det2d_path: Path | None = None
    odom: Pose | None = None
    lidar_stamp: float | None = None
    depth_stamp: float | None = None
    index: int = 0


@dataclass
class FrameBundle:
    stamp: float
    odom: Pose
    lidar: np.ndarray | None = None
    depth: DepthFrame | None = None
    det2d: list[Box2D] = field(default_factory=list)
    lidar_stamp: float | None = None
    depth_stamp: float | None = None
    index: int = 0


def load_frame(entry: FrameManifestEntry, sensors: SensorRig) -> FrameBundle:
    if entry.odom is None:
        raise FrameSkipError(f"frame {entry.index} at {entry.stamp:.6f} has no odometry")
    lidar = read_pcd(entry.lidar_path) if entry.lidar_path is not None else None
    depth = None
    if entry.depth_path is not None:
        raw = read_depth_png(entry.depth_path)
        cam = sensors.camera
        if raw.shape != (cam.height, cam.width):
            raise FrameLoadError(entry.depth_path, 0, f"depth is {raw.shape[1]}x{raw.shape[0]}, camera is {cam.width}x{cam.height}")
        depth = DepthFrame(raw, cam, entry.depth_stamp if entry.depth_stamp is not None else entry.stamp)
    det2d = []
    if entry.det2d_path is not None:
        det2d = [_decode(entry.det2d_path, i, box2d_from_dict, r) for i, r in enumerate(read_jsonl(entry.det2d_path))]
    return FrameBundle(
        entry.stamp,
        entry.odom,
        lidar,
        depth,
        det2d,
        entry.lidar_stamp if entry.lidar_stamp is not None else entry.stamp,
        depth.stamp if depth is not None else None,
        entry.index,
    )


class Dataset:
    """A dataset directory: sensors, manifest and odometry, loaded lazily per frame."""

    def __init__(self, root, odom_max_gap: float = ODOM_MAX_GAP):
        self.root = Path(root)
        manifest = self.root / "manifest.jsonl"
        if not manifest.is_file():
            raise FileNotFoundError(f"no manifest.jsonl in {self.root}")
        with open(self.root / "sensors.json", encoding="utf-8") as fh:
            self.sensors = SensorRig.from_dict(json.load(fh))
        odom_file = self.root / "odometry.jsonl"
        poses = [_decode(odom_file, i, pose_from_dict, r) for i, r in enumerate(read_jsonl(odom_file))] if odom_file.exists() else []
        self.odometry = Odometry(poses, odom_max_gap)
        self.entries = self._entries(read_jsonl(manifest), manifest)

    def _entries(self, records, manifest) -> list[FrameManifestEntry]:
        entries, last = [], -np.inf
        for i, rec in enumerate(records):
            try:
                stamp = float(rec["stamp"])
            except (KeyError, TypeError, ValueError):
                raise FrameLoadError(manifest, None, f"record {i}: missing or bad stamp") from None
            if not stamp > last:
                raise FrameLoadError(manifest, None, f"record {i}: stamps must be strictly increasing")
            last = stamp
            paths = {}
            for key in ("lidar", "depth", "det2d"):
                rel = rec.get(key)
                paths[key] = None if rel is None else self.root / rel
                if paths[key] is not None and not paths[key].is_file():
                    raise FrameLoadError(manifest, None, f"record {i}: {key} file {rel!r} does not exist")
            try:
                odom = self.odometry.at(stamp)
            except FrameSkipError as exc:
                log.warning("frame %d: %s", i, exc)
                odom = None
            entries.append(
                FrameManifestEntry(stamp, paths["lidar"], paths["depth"], paths["det2d"], odom, rec.get("lidar_stamp"), rec.get("depth_stamp"), i)
            )
        return entries

    def __len__(self) -> int:
        return len(self.entries)

    def load(self, i: int) -> FrameBundle:
        return load_frame(self.entries[i], self.sensors)

    def frames(self, skip_bad: bool = False) -> Iterator[FrameBundle]:
        for i in range(len(self)):
            try:
                yield self.load(i)
            except (FrameLoadError, FrameSkipError) as exc:
                if not skip_bad:
                    raise
                log.warning("skipping frame %d: %s", i, exc)

    @property
    def gt_path(self) -> Path:
        return self.root / "gt.jsonl"


class DatasetWriter:
    """Incrementally writes a dataset directory in the layout :class:`Dataset` reads."""

    def __init__(self, root, sensors: SensorRig, binary_pcd: bool = True):
        self.root = Path(root)
        for sub in ("lidar", "depth", "det2d"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        with open(self.root / "sensors.json", "w", encoding="utf-8") as fh:
            json.dump(sensors.to_dict(), fh, indent=2)
        self.binary_pcd = binary_pcd
        self.manifest: list[dict] = []
        self.odometry: list[dict] = []

    def add(self, stamp: float, odom: Pose, lidar=None, depth_raw=None, det2d: list[Box2D] | None = None) -> None:
        k = len(self.manifest)
        rec: dict = {"stamp": float(stamp), "lidar": None, "depth": None, "det2d": None}
        if lidar is not None:
            rec["lidar"] = f"lidar/{k:06d}.pcd"
            write_pcd(self.root / rec["lidar"], lidar, self.binary_pcd)
        if depth_raw is not None:
            rec["depth"] = f"depth/{k:06d}.png"
            write_depth_png(self.root / rec["depth"], depth_raw)
        if det2d is not None:
            rec["det2d"] = f"det2d/{k:06d}.jsonl"
            write_jsonl(self.root / rec["det2d"], [box2d_to_dict(b) for b in det2d])
        self.manifest.append(rec)
        self.odometry.append(pose_to_dict(Pose(stamp, odom.position, odom.orientation)))

    def close(self, gt: list[GtLabel] | None = None) -> None:
        write_jsonl(self.root / "manifest.jsonl", self.manifest)
        write_jsonl(self.root / "odometry.jsonl", self.odometry)
        if gt is not None:
            write_gt(gt, self.root / "gt.jsonl")


def ensure_writable(path) -> Path:
    path = Path(path)
    if path.parent and not path.parent.exists():
        raise OSError(f"directory {path.parent} does not exist")
    if path.exists() and not os.access(path, os.W_OK):
        raise OSError(f"{path} is not writable")
    return path
