"""LiDAR-visual fusion: merge 3D detections, split merged boxes with 2D color detections,
pass through LiDAR detections the camera did not confirm."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import AABB3, Box2D, CameraModel, Pose, iou2d, iou3d, min_enclosing_box, project_to_image
from .lidar_detect import Obstacle3D

log = logging.getLogger(__name__)


@dataclass
class FusionConfig:
    iou_thresh_3d: float = 0.25
    iou_thresh_2d: float = 0.5
    max_stamp_gap: float = 0.05

    def __post_init__(self):
        if not (0.0 <= self.iou_thresh_3d <= 1.0 and 0.0 <= self.iou_thresh_2d <= 1.0):
            raise ValueError("IoU thresholds must lie in [0, 1]")
        if self.max_stamp_gap <= 0:
            raise ValueError("max_stamp_gap must be positive")


@dataclass
class FusionOutput:
    obstacles: list[Obstacle3D] = field(default_factory=list)
    degraded: str | None = None


def _box_key(box: AABB3) -> tuple:
    return (*box.center.round(9), *box.size.round(9))


def _obstacle_key(o: Obstacle3D) -> tuple:
    return (_box_key(o.box), len(o.points))


def _point_depths(points: np.ndarray, cam: CameraModel, body_pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    cam_pts = cam.world_pose(body_pose).apply_inverse(points)
    z = cam_pts[:, 2]
    u = np.full(len(points), np.nan)
    front = z > 1e-6
    u[front] = cam.fx * cam_pts[front, 0] / z[front] + cam.cx
    return u, z


def _separate(a: AABB3, b: AABB3) -> tuple[AABB3, AABB3]:
    """Cut two overlapping boxes apart at the middle of their overlap, along whichever
    horizontal axis loses the least. Boxes only shrink."""
    lo_a, hi_a, lo_b, hi_b = a.min.copy(), a.max.copy(), b.min.copy(), b.max.copy()
    overlap = np.minimum(hi_a, hi_b) - np.maximum(lo_a, lo_b)
    if np.any(overlap <= 0):
        return a, b
    axis = int(np.argmin(overlap[:2] / np.minimum(a.size, b.size)[:2]))
    cut = (max(lo_a[axis], lo_b[axis]) + min(hi_a[axis], hi_b[axis])) / 2
    if a.center[axis] <= b.center[axis]:
        hi_a[axis], lo_b[axis] = cut, cut
    else:
        lo_a[axis], hi_b[axis] = cut, cut
    return AABB3.from_minmax(lo_a, hi_a), AABB3.from_minmax(lo_b, hi_b)


def split_bboxes(parent: Obstacle3D, matches2d: list[Box2D], cam: CameraModel, body_pose: Pose) -> list[Obstacle3D]:
    """Split ``parent`` into one child per matched 2D box along the image u-axis.

    Parent points are assigned by the horizontal extent of each 2D box. A point inside
    several extents goes to the child owning its nearest exclusively-assigned point
    (closest median depth when no child has exclusive points). Children are tight
    boxes around their points, clipped to the parent and cut apart where they overlap.
    """
    if len(matches2d) < 2:
        raise ValueError("split_bboxes needs at least two 2D boxes")
    boxes = sorted(matches2d, key=lambda b: (b.u_min, b.v_min, b.u_max, b.v_max))
    pts = parent.points
    u, z = _point_depths(pts, cam, body_pose)
    inside = np.array([(u >= b.u_min) & (u < b.u_max) for b in boxes])  # (K, N)
    n_in = inside.sum(axis=0)

    owner = np.full(len(u), -1)
    owner[n_in == 1] = np.argmax(inside[:, n_in == 1], axis=0)
    shared = np.flatnonzero(n_in > 1)
    exclusive = np.flatnonzero(n_in == 1)
    if len(shared) and len(exclusive):
        for i in shared:
            cands = np.flatnonzero(inside[:, i])
            pool = exclusive[np.isin(owner[exclusive], cands)]
            if len(pool):
                owner[i] = owner[pool[np.argmin(np.linalg.norm(pts[pool] - pts[i], axis=1))]]
    if np.any(owner[shared] < 0):
        ref_depth = np.array([np.median(z[inside[k]]) if inside[k].any() else np.inf for k in range(len(boxes))])
        for i in shared[owner[shared] < 0]:
            cands = np.flatnonzero(inside[:, i])
            owner[i] = cands[np.argmin(np.abs(ref_depth[cands] - z[i]))]

    kept, child_boxes = [], []
    for k, b in enumerate(boxes):
        sel = owner == k
        if not sel.any():
            log.info("2D box %s captures no parent points; no child emitted", b.as_tuple())
            continue
        fit = AABB3.from_points(pts[sel])
        lo = np.maximum(fit.min, parent.box.min)
        hi = np.minimum(fit.max, parent.box.max)
        kept.append(sel)
        child_boxes.append(AABB3.from_minmax(lo, hi) if np.all(hi > lo) else fit)
    for i in range(len(child_boxes)):
        for j in range(i + 1, len(child_boxes)):
            child_boxes[i], child_boxes[j] = _separate(child_boxes[i], child_boxes[j])

    children = []
    for sel, box in zip(kept, child_boxes):
        # points falling outside a cut box are dropped from that child
        mine = pts[sel][box.contains_points(pts[sel])]
        if len(mine):
            children.append(Obstacle3D(box, mine, parent.source, parent.stamp))
    return children


def _merge_visual_lidar(lidar: list[Obstacle3D], visual3d: list[Obstacle3D], thresh: float):
    """Phase 1. Each LiDAR box joins the visual box it overlaps most (IoU >= thresh)."""
    v_order = sorted(range(len(visual3d)), key=lambda i: _obstacle_key(visual3d[i]))
    owner: dict[int, int] = {}
    for j, lo in enumerate(lidar):
        best, best_iou = None, -1.0
        for i in v_order:
            iou = iou3d(visual3d[i].box, lo.box)
            if iou >= thresh and iou > 0.0 and iou > best_iou:
                best, best_iou = i, iou
        if best is not None:
            owner[j] = best

    fused = []
    for i in v_order:
        matches = sorted((j for j, v in owner.items() if v == i), key=lambda j: _obstacle_key(lidar[j]))
        if not matches:
            continue  # unconfirmed visual detection: false positive
        vis = visual3d[i]
        box = min_enclosing_box([vis.box] + [lidar[j].box for j in matches])
        pts = np.vstack([vis.points] + [lidar[j].points for j in matches])
        fused.append(Obstacle3D(box, pts, "fused", vis.stamp))
    return fused, set(owner)


def fuse(
    lidar: list[Obstacle3D],
    visual3d: list[Obstacle3D],
    visual2d: list[Box2D],
    cam: CameraModel,
    body_pose: Pose,
    cfg: FusionConfig | None = None,
) -> list[Obstacle3D]:
    cfg = cfg or FusionConfig()
    fused, processed = _merge_visual_lidar(lidar, visual3d, cfg.iou_thresh_3d)

    output: list[Obstacle3D] = []
    for obs in fused:
        proj = project_to_image(obs.box, cam, body_pose)
        matched = [] if proj is None else [b for b in visual2d if iou2d(b, proj) >= cfg.iou_thresh_2d]
        children = split_bboxes(obs, matched, cam, body_pose) if len(matched) > 1 else []
        output.extend(children or [obs])

    rest = [lidar[j] for j in range(len(lidar)) if j not in processed]
    output.extend(sorted(rest, key=_obstacle_key))
    return output


def fuse_frame(
    lidar: list[Obstacle3D] | None,
    visual3d: list[Obstacle3D] | None,
    visual2d: list[Box2D],
    cam: CameraModel,
    body_pose: Pose,
    cfg: FusionConfig | None = None,
    lidar_stamp: float | None = None,
    visual_stamp: float | None = None,
) -> FusionOutput:
    """Fusion with degraded modes: a missing stream (``None``) or a stamp gap above
    ``max_stamp_gap`` passes the available detections through unfused."""
    cfg = cfg or FusionConfig()
    if lidar is None and visual3d is None:
        return FusionOutput([], "no detections from either sensor")
    if lidar is None:
        return FusionOutput(list(visual3d), "lidar stream missing; visual detections passed through")
    if visual3d is None:
        return FusionOutput(list(lidar), "depth stream missing; lidar detections passed through")
    if lidar_stamp is not None and visual_stamp is not None and abs(lidar_stamp - visual_stamp) > cfg.max_stamp_gap:
        gap = abs(lidar_stamp - visual_stamp)
        return FusionOutput(list(lidar), f"stamp gap {gap:.3f}s exceeds {cfg.max_stamp_gap:.3f}s; lidar passed through")
    return FusionOutput(fuse(lidar, visual3d, visual2d, cam, body_pose, cfg))
