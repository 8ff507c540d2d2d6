"""Spatial types and the box / IoU / rigid-transform algebra.

Conventions
-----------
* World and body frames are right-handed, z up. The body frame has x forward.
* Camera optical frame: z forward, x right, y down (pinhole convention).
* Point clouds are plain ``(N, 3)`` float arrays.
* Quaternions are stored ``(w, x, y, z)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

# Minimum box edge so that planar / linear clusters keep a defined volume.
FLOOR_SIZE = 0.01

_QUAT_TOL = 1e-6


def as_cloud(points) -> np.ndarray:
    """Coerce ``points`` to a float64 ``(N, 3)`` array (empty input allowed)."""
    arr = np.asarray(points, dtype=float)
    if arr.size == 0:
        return np.zeros((0, 3))
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got shape {arr.shape}")
    return arr


def quat_to_matrix(q: Sequence[float]) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to a unit quaternion with non-negative ``w``."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


@dataclass(frozen=True)
class Pose:
    """Rigid pose of a frame expressed in a parent frame, stamped at ``t``."""

    t: float = 0.0
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    orientation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float).reshape(3)
        quat = np.asarray(self.orientation, dtype=float).reshape(4)
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(quat))):
            raise ValueError("pose contains non-finite values")
        if abs(np.linalg.norm(quat) - 1.0) > _QUAT_TOL:
            raise ValueError(f"quaternion norm {np.linalg.norm(quat):.9f} is not 1")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "orientation", quat)

    @classmethod
    def from_xyz_yaw(cls, x: float, y: float, z: float, yaw: float = 0.0, t: float = 0.0) -> Pose:
        return cls(t, np.array([x, y, z]), np.array([np.cos(yaw / 2), 0.0, 0.0, np.sin(yaw / 2)]))

    @classmethod
    def from_matrix(cls, R: np.ndarray, position, t: float = 0.0) -> Pose:
        return cls(t, np.asarray(position, dtype=float), matrix_to_quat(R))

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.orientation)

    def compose(self, child: Pose) -> Pose:
        """``self ∘ child``: pose of ``child``'s frame in ``self``'s parent frame."""
        R = self.rotation
        return Pose.from_matrix(R @ child.rotation, R @ child.position + self.position, t=self.t)

    def inverse(self) -> Pose:
        Rt = self.rotation.T
        return Pose.from_matrix(Rt, -Rt @ self.position, t=self.t)

    def apply(self, points) -> np.ndarray:
        """Map points from this pose's frame into the parent frame."""
        pts = as_cloud(points)
        return pts @ self.rotation.T + self.position

    def apply_inverse(self, points) -> np.ndarray:
        pts = as_cloud(points)
        return (pts - self.position) @ self.rotation


@dataclass(frozen=True)
class AABB3:
    """Axis-aligned 3D box stored as center + size."""

    center: np.ndarray
    size: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float).reshape(3)
        s = np.asarray(self.size, dtype=float).reshape(3)
        if not (np.all(np.isfinite(c)) and np.all(np.isfinite(s))):
            raise ValueError("box contains non-finite values")
        if np.any(s <= 0):
            raise ValueError(f"box size must be positive, got {s}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "size", s)

    @classmethod
    def from_minmax(cls, lo, hi) -> AABB3:
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        return cls((lo + hi) / 2.0, hi - lo)

    @classmethod
    def from_points(cls, points) -> AABB3:
        """Tight per-axis min/max box; edges below ``FLOOR_SIZE`` are widened about the center."""
        pts = as_cloud(points)
        if len(pts) == 0:
            raise ValueError("cannot fit a box to zero points")
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        return cls((lo + hi) / 2.0, np.maximum(hi - lo, FLOOR_SIZE))

    @property
    def min(self) -> np.ndarray:
        return self.center - self.size / 2.0

    @property
    def max(self) -> np.ndarray:
        return self.center + self.size / 2.0

    @property
    def volume(self) -> float:
        return float(np.prod(self.size))

    def corners(self) -> np.ndarray:
        lo, hi = self.min, self.max
        idx = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)])
        return np.where(idx == 0, lo, hi)

    def contains_points(self, points, slack: float = 1e-9) -> np.ndarray:
        pts = as_cloud(points)
        return np.all((pts >= self.min - slack) & (pts <= self.max + slack), axis=1)

    def contains_box(self, other: AABB3, slack: float = 1e-9) -> bool:
        return bool(np.all(other.min >= self.min - slack) and np.all(other.max <= self.max + slack))

    def translated(self, offset) -> AABB3:
        return AABB3(self.center + np.asarray(offset, dtype=float), self.size)


@dataclass(frozen=True)
class Box2D:
    """Pixel-space rectangle, half-open ``[u_min, u_max) x [v_min, v_max)``."""

    u_min: float
    v_min: float
    u_max: float
    v_max: float
    class_label: str | None = None
    score: float | None = None

    def __post_init__(self):
        if not (self.u_min < self.u_max and self.v_min < self.v_max):
            raise ValueError(f"degenerate 2D box {self.as_tuple()}")
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.u_min, self.v_min, self.u_max, self.v_max)

    @property
    def area(self) -> float:
        return (self.u_max - self.u_min) * (self.v_max - self.v_min)

    def clamped(self, width: float, height: float) -> Box2D | None:
        u0, u1 = np.clip([self.u_min, self.u_max], 0.0, width)
        v0, v1 = np.clip([self.v_min, self.v_max], 0.0, height)
        if u0 >= u1 or v0 >= v1:
            return None
        return Box2D(float(u0), float(v0), float(u1), float(v1), self.class_label, self.score)


# Rotation taking camera-optical axes into body axes (x fwd, y left, z up).
OPTICAL_TO_BODY = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsic: Pose = field(default_factory=lambda: Pose.from_matrix(OPTICAL_TO_BODY, np.zeros(3)))
    depth_scale: float = 0.001
    depth_min: float = 0.2
    depth_max: float = 10.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not self.depth_min < self.depth_max:
            raise ValueError("depth_min must be below depth_max")

    @classmethod
    def forward_facing(cls, fx, fy, cx, cy, width, height, offset=(0.0, 0.0, 0.0), **kw) -> CameraModel:
        """Camera looking along body +x, mounted at ``offset`` in the body frame."""
        return cls(fx, fy, cx, cy, width, height, Pose.from_matrix(OPTICAL_TO_BODY, offset), **kw)

    def world_pose(self, body_pose: Pose) -> Pose:
        return body_pose.compose(self.extrinsic)

    def project(self, cam_points: np.ndarray) -> np.ndarray:
        """Pinhole projection of camera-frame points to ``(N, 2)`` pixel coordinates."""
        z = cam_points[:, 2]
        return np.stack([self.fx * cam_points[:, 0] / z + self.cx, self.fy * cam_points[:, 1] / z + self.cy], axis=1)


def to_world(cloud, pose: Pose) -> np.ndarray:
    """Rigidly transform a sensor-frame cloud by the sensor's world pose."""
    if abs(np.linalg.norm(pose.orientation) - 1.0) > _QUAT_TOL:
        raise ValueError("pose quaternion is not unit length")
    return pose.apply(cloud)


def _overlap(lo_a, hi_a, lo_b, hi_b):
    return np.clip(np.minimum(hi_a, hi_b) - np.maximum(lo_a, lo_b), 0.0, None)


def iou3d(a: AABB3, b: AABB3) -> float:
    inter = float(np.prod(_overlap(a.min, a.max, b.min, b.max)))
    if inter <= 0.0:
        return 0.0
    return min(1.0, inter / (a.volume + b.volume - inter))


def iou2d(a: Box2D, b: Box2D) -> float:
    iw = _overlap(a.u_min, a.u_max, b.u_min, b.u_max)
    ih = _overlap(a.v_min, a.v_max, b.v_min, b.v_max)
    inter = float(iw * ih)
    if inter <= 0.0:
        return 0.0
    return min(1.0, inter / (a.area + b.area - inter))


def min_enclosing_box(boxes: Iterable[AABB3]) -> AABB3:
    boxes = list(boxes)
    if not boxes:
        raise ValueError("min_enclosing_box needs at least one box")
    lo = np.min([b.min for b in boxes], axis=0)
    hi = np.max([b.max for b in boxes], axis=0)
    return AABB3.from_minmax(lo, hi)


def project_to_image(box: AABB3, cam: CameraModel, body_pose: Pose) -> Box2D | None:
    """Pixel AABB of the box corners that lie in front of the camera, clamped to the image.

    Returns ``None`` when no corner has positive depth or the clamped box is empty.
    """
    cam_pts = cam.world_pose(body_pose).apply_inverse(box.corners())
    front = cam_pts[:, 2] > 1e-6
    if not np.any(front):
        return None
    uv = cam.project(cam_pts[front])
    u0, v0 = uv.min(axis=0)
    u1, v1 = uv.max(axis=0)
    if u0 >= u1 or v0 >= v1:
        return None
    return Box2D(float(u0), float(v0), float(u1), float(v1)).clamped(cam.width, cam.height)
