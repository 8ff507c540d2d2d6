"""LiDAR obstacle detection: filter cascade, DBSCAN, axis-aligned boxes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import FrameSkipError
from .geometry import AABB3, Pose, as_cloud, to_world

Source = Literal["lidar", "visual", "fused"]


@dataclass
class LidarConfig:
    max_range: float = 15.0
    sigma_dist: float = 10.0
    n_max: int = 3000
    voxel_size_init: float = 0.1
    dbscan_eps: float = 0.35
    dbscan_min_pts: int = 6
    # None disables ground removal
    ground_z: float | None = 0.15

    def __post_init__(self):
        for name in ("max_range", "sigma_dist", "voxel_size_init", "dbscan_eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.dbscan_min_pts < 1 or self.n_max < self.dbscan_min_pts:
            raise ValueError("need 1 <= dbscan_min_pts <= n_max")


@dataclass
class Obstacle3D:
    box: AABB3
    points: np.ndarray = field(repr=False)
    source: Source = "lidar"
    stamp: float = 0.0

    def __post_init__(self):
        self.points = as_cloud(self.points)
        if len(self.points) == 0:
            raise ValueError("obstacle needs at least one point")

    @classmethod
    def from_points(cls, points, source: Source = "lidar", stamp: float = 0.0) -> Obstacle3D:
        pts = as_cloud(points)
        return cls(AABB3.from_points(pts), pts, source, stamp)


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def range_filter(cloud, robot, max_range: float) -> np.ndarray:
    pts = as_cloud(cloud)
    d = np.linalg.norm(pts - np.asarray(robot, dtype=float), axis=1)
    return pts[d <= max_range]


def distance_filter(cloud, robot, sigma_dist: float, rng_seed=0) -> np.ndarray:
    """Keep each point with probability ``exp(-||p - robot|| / sigma_dist**2)``.

    One uniform draw per point, in input order, so output is a pure function of
    (cloud, robot, sigma_dist, seed).
    """
    if sigma_dist <= 0:
        raise ValueError("sigma_dist must be positive")
    pts = as_cloud(cloud)
    d = np.linalg.norm(pts - np.asarray(robot, dtype=float), axis=1)
    keep_prob = np.exp(-d / sigma_dist**2)
    draws = _rng(rng_seed).random(len(pts))
    return pts[draws < keep_prob]


def voxel_filter(cloud, voxel_size: float) -> np.ndarray:
    """Replace the points of each occupied voxel by their centroid (sorted by voxel key)."""
    pts = as_cloud(cloud)
    if len(pts) == 0:
        return pts
    keys = np.floor(pts / voxel_size).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, pts)
    return sums / counts[:, None]


def voxel_cap_filter(cloud, n_max: int, voxel_size_init: float) -> np.ndarray:
    """Voxel-downsample, doubling the voxel edge until at most ``n_max`` points remain."""
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    pts = as_cloud(cloud)
    size = voxel_size_init
    out = voxel_filter(pts, size)
    while len(out) > n_max:
        size *= 2.0
        out = voxel_filter(pts, size)
    return out


def remove_ground(cloud, ground_z: float | None) -> np.ndarray:
    pts = as_cloud(cloud)
    if ground_z is None:
        return pts
    return pts[pts[:, 2] >= ground_z]


def dbscan(cloud, eps: float, min_pts: int) -> list[np.ndarray]:
    """DBSCAN over Euclidean distance; returns sorted index arrays, one per cluster.

    A point's neighbourhood includes itself. Border points reachable from several
    clusters join the one owning their nearest core point.
    """
    if eps <= 0 or min_pts < 1:
        raise ValueError("need eps > 0 and min_pts >= 1")
    pts = as_cloud(cloud)
    n = len(pts)
    if n == 0:
        return []
    tree = cKDTree(pts)
    pairs = tree.query_pairs(eps, output_type="ndarray")
    i, j = (pairs[:, 0], pairs[:, 1]) if len(pairs) else (np.zeros(0, int), np.zeros(0, int))
    n_neigh = 1 + np.bincount(i, minlength=n) + np.bincount(j, minlength=n)
    core = n_neigh >= min_pts
    if not np.any(core):
        return []

    both = core[i] & core[j]
    graph = coo_matrix((np.ones(both.sum()), (i[both], j[both])), shape=(n, n))
    _, comp = connected_components(graph, directed=False)
    labels = np.full(n, -1)
    labels[core] = comp[core]

    # border points: nearest core neighbour decides
    one = core[i] ^ core[j]
    border = np.where(core[i[one]], j[one], i[one])
    owner = np.where(core[i[one]], i[one], j[one])
    if len(border):
        dist = np.linalg.norm(pts[border] - pts[owner], axis=1)
        order = np.lexsort((owner, dist, border))
        border, owner = border[order], owner[order]
        first = np.r_[True, border[1:] != border[:-1]]
        labels[border[first]] = labels[owner[first]]

    clusters = [np.flatnonzero(labels == lab) for lab in np.unique(labels[labels >= 0])]
    clusters.sort(key=lambda idx: idx[0])
    return clusters


def cluster_obstacles(cloud, eps: float, min_pts: int, source: Source, stamp: float = 0.0) -> list[Obstacle3D]:
    pts = as_cloud(cloud)
    return [Obstacle3D.from_points(pts[idx], source, stamp) for idx in dbscan(pts, eps, min_pts)]


def preprocess_scan(scan, sensor_pose: Pose | None, cfg: LidarConfig, rng_seed=0) -> np.ndarray:
    """Filter cascade up to (not including) clustering; returns the world-frame cloud.

    Order: range -> world transform -> distance -> ground removal -> voxel cap.
    Ground points are dropped before the cap so they do not inflate the voxel size.
    """
    if sensor_pose is None:
        raise FrameSkipError("no pose available for LiDAR scan")
    pts = range_filter(scan, np.zeros(3), cfg.max_range)
    pts = to_world(pts, sensor_pose)
    pts = distance_filter(pts, sensor_pose.position, cfg.sigma_dist, rng_seed)
    pts = remove_ground(pts, cfg.ground_z)
    return voxel_cap_filter(pts, cfg.n_max, cfg.voxel_size_init)


def detect_lidar(scan, sensor_pose: Pose | None, cfg: LidarConfig | None = None, rng_seed=0, stamp: float = 0.0) -> list[Obstacle3D]:
    cfg = cfg or LidarConfig()
    cloud = preprocess_scan(scan, sensor_pose, cfg, rng_seed)
    return cluster_obstacles(cloud, cfg.dbscan_eps, cfg.dbscan_min_pts, "lidar", stamp)
