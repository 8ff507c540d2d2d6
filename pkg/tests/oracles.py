"""Independent reference implementations the library is checked against."""

from __future__ import annotations

import numpy as np

from dynobs.geometry import AABB3, Box2D


def mc_iou3d(a: AABB3, b: AABB3, n: int, rng) -> float:
    """Monte-Carlo IoU: sample the joint bounding region, count membership."""
    lo = np.minimum(a.min, b.min)
    hi = np.maximum(a.max, b.max)
    u = rng.random((3, n), dtype=np.float32)
    in_a = np.ones(n, dtype=bool)
    in_b = np.ones(n, dtype=bool)
    for k in range(3):
        x = lo[k] + u[k] * (hi[k] - lo[k])
        in_a &= (x >= a.min[k]) & (x <= a.max[k])
        in_b &= (x >= b.min[k]) & (x <= b.max[k])
    union = np.count_nonzero(in_a | in_b)
    return np.count_nonzero(in_a & in_b) / union if union else 0.0


def pixel_iou2d(a: Box2D, b: Box2D, res: float = 1.0) -> float:
    """Count integer-grid pixel centres covered by each box."""
    u0, v0 = min(a.u_min, b.u_min), min(a.v_min, b.v_min)
    u1, v1 = max(a.u_max, b.u_max), max(a.v_max, b.v_max)
    us = np.arange(np.floor(u0), np.ceil(u1), res) + res / 2
    vs = np.arange(np.floor(v0), np.ceil(v1), res) + res / 2
    U, V = np.meshgrid(us, vs)

    def inside(box):
        return (U >= box.u_min) & (U < box.u_max) & (V >= box.v_min) & (V < box.v_max)

    ia, ib = inside(a), inside(b)
    union = np.count_nonzero(ia | ib)
    return np.count_nonzero(ia & ib) / union if union else 0.0


def naive_dbscan(pts: np.ndarray, eps: float, min_pts: int):
    """Textbook O(n^2) DBSCAN. Returns (core mask, core-component labels, eps adjacency)."""
    n = len(pts)
    d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=2) if n else np.zeros((0, 0))
    adj = d <= eps
    core = adj.sum(axis=1) >= min_pts if n else np.zeros(0, bool)
    labels = -np.ones(n, dtype=int)
    k = 0
    for i in range(n):
        if not core[i] or labels[i] >= 0:
            continue
        stack = [i]
        labels[i] = k
        while stack:
            j = stack.pop()
            for m in np.flatnonzero(adj[j] & core):
                if labels[m] < 0:
                    labels[m] = k
                    stack.append(m)
        k += 1
    return core, labels, adj


def dbscan_matches_reference(pts: np.ndarray, clusters: list[np.ndarray], eps: float, min_pts: int) -> bool:
    """Compare a clustering against :func:`naive_dbscan` up to relabeling.

    Core points must be partitioned identically. A border point may go to any cluster
    owning one of its core neighbours; a point with no core neighbour must be noise.
    """
    labels = -np.ones(len(pts), int)
    for k, idx in enumerate(clusters):
        labels[idx] = k
    core, ref, adj = naive_dbscan(pts, eps, min_pts)
    mapping: dict[int, int] = {}
    for i in np.flatnonzero(core):
        if labels[i] < 0 or mapping.setdefault(ref[i], labels[i]) != labels[i]:
            return False
    if len(set(mapping.values())) != len(mapping):
        return False
    for i in np.flatnonzero(~core):
        owners = {ref[j] for j in np.flatnonzero(adj[i] & core)}
        if labels[i] not in ({mapping[o] for o in owners} if owners else {-1}):
            return False
    return True


def rot_z(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot_axis_angle(axis, theta: float) -> np.ndarray:
    """Rodrigues' formula."""
    k = np.asarray(axis, dtype=float)
    k = k / np.linalg.norm(k)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * K + (1 - np.cos(theta)) * K @ K


def ca_trajectory(p0, v0, a, t):
    return np.asarray(p0) + np.asarray(v0) * t + 0.5 * np.asarray(a) * t * t


def brute_force_max_tp(ious: np.ndarray, thresh: float) -> int:
    """Largest one-to-one matching among pairs with IoU >= thresh, by exhaustive search."""
    n_p, n_g = ious.shape

    def best(i, used):
        if i == n_p:
            return 0
        out = best(i + 1, used)
        for j in range(n_g):
            if j not in used and ious[i, j] >= thresh and ious[i, j] > 0:
                out = max(out, 1 + best(i + 1, used | {j}))
        return out

    return best(0, frozenset())


def hand_fixture():
    """Three hand-labelled frames of unit cubes.

    A unit cube shifted by ``d`` along x has IoU ``(1 - d) / (1 + d)``:
    0.1 -> 0.818, 0.2 -> 0.667, 0.5 -> 0.333.

    frame 0: GT at x=0 and x=5; preds shifted 0.2 and 0.5, plus one far false alarm
    frame 1: GT at x=0; no predictions
    frame 2: GT at x=0 plus a static GT box; pred shifted 0.1 plus a static pred

    Hand counts (tp, fp, fn): 0.3 -> (3, 1, 1); 0.5 -> (2, 2, 2); 0.7 -> (1, 3, 3).
    """
    from dynobs.dataset_io import GtBox, GtLabel, ResultFrame, ResultObstacle

    one = np.ones(3)

    def pred(x, cls="dynamic", k=0):
        return ResultObstacle(k, np.array([x, 0.0, 0.5]), one, np.zeros(3), cls, "fused")

    def gt(x, k, dyn=True):
        return GtBox(AABB3([x, 0.0, 0.5], one), k, dyn)

    results = [
        ResultFrame(0.0, [pred(0.2, k=0), pred(5.5, k=1), pred(20.0, k=2)]),
        ResultFrame(0.1, []),
        ResultFrame(0.2, [pred(0.1, k=0), pred(-8.0, "static", k=3)]),
    ]
    gts = [
        GtLabel(0.0, [gt(0.0, 0), gt(5.0, 1)]),
        GtLabel(0.1, [gt(0.0, 0)]),
        GtLabel(0.2, [gt(0.0, 0), gt(-8.0, 7, dyn=False)]),
    ]
    expected = {
        0.3: dict(tp=3, fp=1, fn=1, precision=0.75, recall=0.75, pos_err=(0.2 + 0.5 + 0.1) / 3),
        0.5: dict(tp=2, fp=2, fn=2, precision=0.5, recall=0.5, pos_err=(0.2 + 0.1) / 2),
        0.7: dict(tp=1, fp=3, fn=3, precision=0.25, recall=0.25, pos_err=0.1),
    }
    return results, gts, expected
