"""Visual depth detection: a DBSCAN detector and a U-depth detector joined by ensemble agreement."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import AABB3, Box2D, CameraModel, Pose, min_enclosing_box, iou3d
from .lidar_detect import Obstacle3D, cluster_obstacles, remove_ground, voxel_filter

# Vertical runs shorter than this are treated as speckle.
_MIN_RUN_PX = 3


@dataclass
class DepthFrame:
    """Row-major depth image in raw sensor units; 0 marks an invalid pixel."""

    values: np.ndarray = field(repr=False)
    cam: CameraModel
    stamp: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.shape != (self.cam.height, self.cam.width):
            raise ValueError(f"depth shape {self.values.shape} != camera ({self.cam.height}, {self.cam.width})")

    @property
    def width(self) -> int:
        return self.cam.width

    @property
    def height(self) -> int:
        return self.cam.height

    def meters(self) -> np.ndarray:
        return self.values.astype(float) * self.cam.depth_scale

    def valid_mask(self) -> np.ndarray:
        d = self.meters()
        return (self.values > 0) & (d >= self.cam.depth_min) & (d <= self.cam.depth_max)


@dataclass
class UDepthMap:
    counts: np.ndarray = field(repr=False)  # (n_bins, width)
    bin_size: float
    depth_min: float

    @property
    def n_bins(self) -> int:
        return self.counts.shape[0]

    @property
    def width(self) -> int:
        return self.counts.shape[1]

    def bin_range(self, b0: int, b1: int) -> tuple[float, float]:
        """Depth interval covered by bins ``b0..b1`` inclusive."""
        return self.depth_min + b0 * self.bin_size, self.depth_min + (b1 + 1) * self.bin_size


@dataclass
class DepthDetectConfig:
    voxel_size: float = 0.1
    dbscan_eps: float = 0.25
    dbscan_min_pts: int = 8
    u_bin_size: float = 0.2
    u_hit_thresh: int = 20
    min_box_px: int = 8
    ensemble_iou_thresh: float = 0.25
    depth_continuity_tol: float = 0.3
    # None disables ground removal
    ground_z: float | None = 0.15

    def __post_init__(self):
        for name in ("voxel_size", "dbscan_eps", "u_bin_size", "depth_continuity_tol"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.dbscan_min_pts < 1 or self.u_hit_thresh < 1 or self.min_box_px < 1:
            raise ValueError("counts must be >= 1")
        if not 0.0 <= self.ensemble_iou_thresh <= 1.0:
            raise ValueError("ensemble_iou_thresh must lie in [0, 1]")


def pixel_rays(cam: CameraModel) -> np.ndarray:
    """Camera-frame ray directions with unit z, shape ``(H, W, 3)``; pixel ``(u, v)`` sits at ``(u, v)``."""
    u = np.arange(cam.width, dtype=float)
    v = np.arange(cam.height, dtype=float)
    uu, vv = np.meshgrid(u, v)
    return np.stack([(uu - cam.cx) / cam.fx, (vv - cam.cy) / cam.fy, np.ones_like(uu)], axis=-1)


def backproject(frame: DepthFrame, body_pose: Pose, mask: np.ndarray | None = None) -> np.ndarray:
    """World-frame points for the valid pixels selected by ``mask`` (row-major order)."""
    sel = frame.valid_mask() if mask is None else mask & frame.valid_mask()
    cam_pts = pixel_rays(frame.cam)[sel] * frame.meters()[sel][:, None]
    return frame.cam.world_pose(body_pose).apply(cam_pts)


def depth_to_cloud(frame: DepthFrame, body_pose: Pose) -> np.ndarray:
    return backproject(frame, body_pose)


def ground_mask(frame: DepthFrame, body_pose: Pose, ground_z: float | None) -> np.ndarray:
    """True for pixels whose back-projected world height is at or above ``ground_z``."""
    if ground_z is None:
        return np.ones((frame.height, frame.width), dtype=bool)
    R = frame.cam.world_pose(body_pose).rotation
    t = frame.cam.world_pose(body_pose).position
    z = (pixel_rays(frame.cam) @ R[2]) * frame.meters() + t[2]
    return z >= ground_z


def preprocess_depth(frame: DepthFrame, body_pose: Pose, cfg: DepthDetectConfig) -> np.ndarray:
    cloud = remove_ground(depth_to_cloud(frame, body_pose), cfg.ground_z)
    return voxel_filter(cloud, cfg.voxel_size)


def dbscan_depth_detect(frame: DepthFrame, body_pose: Pose, cfg: DepthDetectConfig | None = None) -> list[Obstacle3D]:
    cfg = cfg or DepthDetectConfig()
    cloud = preprocess_depth(frame, body_pose, cfg)
    return cluster_obstacles(cloud, cfg.dbscan_eps, cfg.dbscan_min_pts, "visual", frame.stamp)


def build_udepth(frame: DepthFrame, cfg: DepthDetectConfig | None = None, mask: np.ndarray | None = None) -> UDepthMap:
    """Per-column histogram of valid depths; bin 0 (top row of the map) is nearest the camera."""
    cfg = cfg or DepthDetectConfig()
    cam = frame.cam
    n_bins = int(np.ceil((cam.depth_max - cam.depth_min) / cfg.u_bin_size - 1e-9))
    valid = frame.valid_mask() if mask is None else frame.valid_mask() & mask
    d = frame.meters()[valid]
    cols = np.nonzero(valid)[1]
    # small epsilon keeps depths that sit exactly on a bin edge in the upper bin
    bins = np.clip(np.floor((d - cam.depth_min) / cfg.u_bin_size + 1e-9).astype(int), 0, n_bins - 1)
    flat = np.bincount(bins * cam.width + cols, minlength=n_bins * cam.width)
    return UDepthMap(flat.reshape(n_bins, cam.width), cfg.u_bin_size, cam.depth_min)


def _runs(row: np.ndarray) -> list[tuple[int, int]]:
    """Inclusive ``(start, end)`` index pairs of True runs in a 1D boolean array."""
    padded = np.r_[False, row, False].astype(int)
    edges = np.flatnonzero(np.diff(padded))
    return list(zip(edges[::2], edges[1::2] - 1))


def group_udepth_lines(hits: np.ndarray, min_width: int = 1) -> list[tuple[int, int, int, int]]:
    """Group thresholded U-map cells into rectangles ``(u0, u1, b0, b1)`` (inclusive).

    Horizontal runs within one bin row are line segments; segments in adjacent bin
    rows whose column spans overlap or touch are merged into one obstacle.
    """
    segs = [(b, u0, u1) for b in range(hits.shape[0]) for u0, u1 in _runs(hits[b])]
    parent = list(range(len(segs)))

    def find(k):
        while parent[k] != k:
            parent[k] = parent[parent[k]]
            k = parent[k]
        return k

    by_row: dict[int, list[int]] = {}
    for k, (b, _, _) in enumerate(segs):
        by_row.setdefault(b, []).append(k)
    for k, (b, u0, u1) in enumerate(segs):
        for m in by_row.get(b + 1, []):
            _, v0, v1 = segs[m]
            if u0 <= v1 + 1 and v0 <= u1 + 1:
                parent[find(m)] = find(k)

    groups: dict[int, list[int]] = {}
    for k in range(len(segs)):
        groups.setdefault(find(k), []).append(k)
    rects = []
    for members in groups.values():
        bs = [segs[k][0] for k in members]
        u0 = min(segs[k][1] for k in members)
        u1 = max(segs[k][2] for k in members)
        if u1 - u0 + 1 >= min_width:
            rects.append((u0, u1, min(bs), max(bs)))
    return sorted(rects)


def _longest_runs(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per column, inclusive start row and length of the longest vertical True run."""
    h, w = mask.shape
    run = np.zeros(w, dtype=int)
    best_len = np.zeros(w, dtype=int)
    best_end = np.zeros(w, dtype=int)
    for r in range(h):
        run = np.where(mask[r], run + 1, 0)
        better = run > best_len
        best_len = np.where(better, run, best_len)
        best_end = np.where(better, r, best_end)
    return best_end - best_len + 1, best_len


def udepth_boxes(frame: DepthFrame, cfg: DepthDetectConfig, mask: np.ndarray | None = None):
    """U-depth detector up to the image stage: yields ``(Box2D, pixel_mask)`` per obstacle."""
    umap = build_udepth(frame, cfg, mask)
    rects = group_udepth_lines(umap.counts >= cfg.u_hit_thresh, cfg.min_box_px)
    depth = frame.meters()
    valid = frame.valid_mask() if mask is None else frame.valid_mask() & mask
    out = []
    for u0, u1, b0, b1 in rects:
        lo, hi = umap.bin_range(b0, b1)
        lo -= cfg.depth_continuity_tol
        hi += cfg.depth_continuity_tol
        sub = valid[:, u0 : u1 + 1] & (depth[:, u0 : u1 + 1] >= lo) & (depth[:, u0 : u1 + 1] <= hi)
        starts, lengths = _longest_runs(sub)
        ok = lengths >= _MIN_RUN_PX
        if not np.any(ok):
            continue
        v_top = int(np.floor(np.percentile(starts[ok], 10)))
        v_bot = int(np.ceil(np.percentile(starts[ok] + lengths[ok], 90)))
        box = Box2D(float(u0), float(v_top), float(u1 + 1), float(v_bot))
        pix = np.zeros_like(valid)
        pix[v_top:v_bot, u0 : u1 + 1] = sub[v_top:v_bot]
        if pix.any():
            out.append((box, pix))
    return out


def udepth_detect(frame: DepthFrame, body_pose: Pose, cfg: DepthDetectConfig | None = None) -> list[Obstacle3D]:
    """Obstacles from the U-depth map.

    The 3D box is the world AABB of the pixels inside each image box whose depth falls
    in the obstacle's depth range; the stored points are those pixels voxel-downsampled.
    """
    cfg = cfg or DepthDetectConfig()
    mask = ground_mask(frame, body_pose, cfg.ground_z)
    obstacles = []
    for _, pix in udepth_boxes(frame, cfg, mask):
        pts = backproject(frame, body_pose, pix)
        if len(pts) == 0:
            continue
        obstacles.append(Obstacle3D(AABB3.from_points(pts), voxel_filter(pts, cfg.voxel_size), "visual", frame.stamp))
    return obstacles


def ensemble_match(a: list[Obstacle3D], b: list[Obstacle3D], iou_thresh: float) -> list[Obstacle3D]:
    """Keep only detections both detectors agree on (greedy, best IoU first); merge each pair."""
    pairs = []
    for i, oa in enumerate(a):
        for j, ob in enumerate(b):
            iou = iou3d(oa.box, ob.box)
            if iou >= iou_thresh and iou > 0.0:
                pairs.append((-iou, i, j))
    pairs.sort()
    used_a, used_b, merged = set(), set(), []
    for _, i, j in pairs:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        box = min_enclosing_box([a[i].box, b[j].box])
        merged.append(Obstacle3D(box, np.vstack([a[i].points, b[j].points]), "visual", a[i].stamp))
    return merged


def detect_depth(frame: DepthFrame, body_pose: Pose, cfg: DepthDetectConfig | None = None) -> list[Obstacle3D]:
    cfg = cfg or DepthDetectConfig()
    return ensemble_match(dbscan_depth_detect(frame, body_pose, cfg), udepth_detect(frame, body_pose, cfg), cfg.ensemble_iou_thresh)
