"""Feature-based association, constant-acceleration Kalman filtering and
dynamic/static classification of fused detections."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy.spatial import cKDTree

from .geometry import AABB3, FLOOR_SIZE, Box2D, CameraModel, Pose, iou2d, iou3d, project_to_image
from .lidar_detect import Obstacle3D

MotionClass = Literal["unclassified", "static", "dynamic"]

# Lower bounds on the per-dimension scale used to standardise features:
# pos (3), dim (3), point count (1), point std (3).
FEATURE_SCALE_FLOOR = np.array([0.1, 0.1, 0.1, 0.05, 0.05, 0.05, 1.0, 0.02, 0.02, 0.02])


@dataclass
class TrackConfig:
    sim_weights: tuple[float, ...] = (1.0,) * 10
    assoc_iou_gate: float = 0.1
    q_pos: float = 1e-3
    q_vel: float = 0.01
    q_acc: float = 0.1
    r_pos: float = 0.01
    r_vel: float = 0.5
    r_acc: float = 25.0
    init_vel_var: float = 100.0
    init_acc_var: float = 100.0
    vel_thresh: float = 0.25
    disp_thresh: float = 0.10
    disp_majority: float = 0.5
    # compare against the scene cloud this many frames back
    disp_lag_frames: int = 3
    cls_iou2d_thresh: float = 0.5
    retire_after: int = 3
    vote_k: int = 3
    vote_n: int = 5
    history_len: int = 5

    def __post_init__(self):
        self.sim_weights = tuple(float(w) for w in self.sim_weights)
        if len(self.sim_weights) != 10 or min(self.sim_weights) < 0 or max(self.sim_weights) <= 0:
            raise ValueError("sim_weights must be 10 non-negative reals, not all zero")
        for name in ("assoc_iou_gate", "disp_majority", "cls_iou2d_thresh"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("q_pos", "q_vel", "q_acc", "r_pos", "r_vel", "r_acc", "init_vel_var", "init_acc_var"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 1 <= self.vote_k <= self.vote_n:
            raise ValueError("need 1 <= vote_k <= vote_n")
        if self.retire_after < 1 or self.history_len < 1 or self.disp_lag_frames < 1:
            raise ValueError("retire_after, history_len and disp_lag_frames must be >= 1")


def feature_vec(o: Obstacle3D) -> np.ndarray:
    """``[center(3), size(3), point count, per-axis population std(3)]``."""
    pts = o.points
    return np.concatenate([o.box.center, o.box.size, [float(len(pts))], pts.std(axis=0)])


# --- Kalman filter ---------------------------------------------------------------


@dataclass
class KalmanState:
    """State ``[p(3), v(3), a(3)]`` with covariance ``P``."""

    x: np.ndarray
    P: np.ndarray
    stamp: float = 0.0

    @property
    def position(self) -> np.ndarray:
        return self.x[0:3]

    @property
    def velocity(self) -> np.ndarray:
        return self.x[3:6]

    @property
    def acceleration(self) -> np.ndarray:
        return self.x[6:9]


def _block_diag3(a: float, b: float, c: float) -> np.ndarray:
    return np.diag(np.repeat([a, b, c], 3))


def transition(dt: float) -> np.ndarray:
    I = np.eye(3)
    A = np.eye(9)
    A[0:3, 3:6] = dt * I
    A[0:3, 6:9] = 0.5 * dt * dt * I
    A[3:6, 6:9] = dt * I
    return A


def init_state(position, stamp: float, cfg: TrackConfig) -> KalmanState:
    x = np.concatenate([np.asarray(position, dtype=float), np.zeros(6)])
    return KalmanState(x, _block_diag3(cfg.r_pos, cfg.init_vel_var, cfg.init_acc_var), stamp)


def kf_predict(s: KalmanState, dt: float, cfg: TrackConfig) -> KalmanState:
    if dt <= 0:
        raise ValueError("dt must be positive")
    A = transition(dt)
    Q = _block_diag3(cfg.q_pos, cfg.q_vel, cfg.q_acc)
    P = A @ s.P @ A.T + Q
    return KalmanState(A @ s.x, 0.5 * (P + P.T), s.stamp + dt)


def finite_difference_obs(obs_pos, stamp: float, history: list[tuple[float, np.ndarray]]):
    """Position, backward-difference velocity and acceleration from stamped positions.

    ``history`` holds earlier ``(stamp, position)`` observations, oldest first.
    Returns ``(z, H)`` where rows absent for lack of history are dropped. The
    backward-difference velocity is an exact observation of ``v - a * dt / 2``,
    which ``H`` encodes.
    """
    I = np.eye(3)
    Z = np.zeros((3, 3))
    P_t = np.asarray(obs_pos, dtype=float)
    z = [P_t]
    H = [np.hstack([I, Z, Z])]
    if len(history) >= 1:
        t1, P_1 = history[-1]
        dt1 = stamp - t1
        V_t = (P_t - P_1) / dt1
        z.append(V_t)
        H.append(np.hstack([Z, I, -0.5 * dt1 * I]))
        if len(history) >= 2:
            t2, P_2 = history[-2]
            dt2 = t1 - t2
            V_1 = (P_1 - P_2) / dt2
            z.append((V_t - V_1) / (0.5 * (dt1 + dt2)))
            H.append(np.hstack([Z, Z, I]))
    return np.concatenate(z), np.vstack(H)


def kf_update(s: KalmanState, obs_pos, history: list[tuple[float, np.ndarray]], cfg: TrackConfig) -> KalmanState:
    """Standard (Joseph-form) update with the finite-difference observation vector.

    ``s`` must already be predicted to the observation time ``s.stamp``.
    """
    z, H = finite_difference_obs(obs_pos, s.stamp, history)
    R = np.diag(np.repeat([cfg.r_pos, cfg.r_vel, cfg.r_acc][: len(z) // 3], 3))
    S = H @ s.P @ H.T + R
    K = np.linalg.solve(S, H @ s.P).T
    x = s.x + K @ (z - H @ s.x)
    IKH = np.eye(9) - K @ H
    P = IKH @ s.P @ IKH.T + K @ R @ K.T
    return KalmanState(x, 0.5 * (P + P.T), s.stamp)


# --- tracks and association ------------------------------------------------------


@dataclass
class HistoryEntry:
    box: AABB3
    points: np.ndarray = field(repr=False)
    stamp: float
    feature: np.ndarray = field(repr=False)


@dataclass
class Track:
    id: int
    state: KalmanState
    history: deque
    misses: int = 0
    motion_class: MotionClass = "unclassified"
    dynamic_votes: deque = field(default_factory=deque)

    @property
    def last(self) -> HistoryEntry:
        return self.history[-1]

    def estimated_box(self, size=None) -> AABB3:
        return AABB3(self.state.position, self.last.box.size if size is None else size)


def weighted_cosine(a: np.ndarray, b: np.ndarray, w: np.ndarray) -> float:
    na = np.sqrt(np.sum(w * a * a))
    nb = np.sqrt(np.sum(w * b * b))
    if na == 0.0 and nb == 0.0:
        return 1.0
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.sum(w * a * b) / (na * nb))


def similarity_matrix(track_feats: np.ndarray, det_feats: np.ndarray, weights) -> np.ndarray:
    """Weighted cosine similarity after per-dimension z-scoring over both populations."""
    pop = np.vstack([track_feats, det_feats])
    mu = pop.mean(axis=0)
    scale = np.maximum(pop.std(axis=0), FEATURE_SCALE_FLOOR)
    ts = (track_feats - mu) / scale
    ds = (det_feats - mu) / scale
    w = np.asarray(weights, dtype=float)
    return np.array([[weighted_cosine(t, d, w) for t in ts] for d in ds]).reshape(len(ds), len(ts))


def associate(tracks: list[Track], detections: list[Obstacle3D], cfg: TrackConfig) -> list[tuple[int | None, int | None]]:
    """Pairs ``(track_index, detection_index)``; ``None`` on one side marks an unmatched item.

    Each detection's candidate is its most similar track. Candidates are resolved in
    descending similarity; a pair is accepted when the candidate is still free and its
    last box overlaps the detection by at least ``assoc_iou_gate``.
    """
    pairs: list[tuple[int | None, int | None]] = []
    if not tracks or not detections:
        return [(None, j) for j in range(len(detections))] + [(i, None) for i in range(len(tracks))]
    dfeat = np.array([feature_vec(d) for d in detections])
    tfeat = np.array([t.last.feature for t in tracks])
    sim = similarity_matrix(tfeat, dfeat, cfg.sim_weights)
    best = np.argmax(sim, axis=1)

    order = sorted(range(len(detections)), key=lambda j: (-round(sim[j, best[j]], 12), tuple(dfeat[j].round(9))))
    claimed: set[int] = set()
    for j in order:
        i = int(best[j])
        if i not in claimed and iou3d(tracks[i].last.box, detections[j].box) >= cfg.assoc_iou_gate:
            claimed.add(i)
            pairs.append((i, j))
        else:
            pairs.append((None, j))
    pairs.extend((i, None) for i in range(len(tracks)) if i not in claimed)
    return pairs


# --- dynamic classification ------------------------------------------------------


def displacement_fraction(points: np.ndarray, prev_cloud: np.ndarray, disp_thresh: float) -> float:
    """Fraction of ``points`` whose nearest neighbour in ``prev_cloud`` is farther than ``disp_thresh``."""
    if len(points) == 0:
        return 0.0
    d, _ = cKDTree(prev_cloud).query(points, k=1, distance_upper_bound=disp_thresh)
    return float(np.mean(d > disp_thresh))


def frame_verdict(
    track: Track,
    cur: Obstacle3D,
    prev_cloud: np.ndarray | None,
    visual2d: list[Box2D],
    cam: CameraModel | None,
    body_pose: Pose | None,
    cfg: TrackConfig,
) -> bool:
    """Single-frame dynamic test: 2D-detection overlap OR (speed AND point displacement)."""
    est = track.estimated_box(cur.box.size)
    if cam is not None and body_pose is not None and visual2d:
        proj = project_to_image(est, cam, body_pose)
        if proj is not None and any(iou2d(proj, b) >= cfg.cls_iou2d_thresh for b in visual2d):
            return True
    if prev_cloud is None or len(prev_cloud) == 0:
        return False
    if np.linalg.norm(track.state.velocity) <= cfg.vel_thresh:
        return False
    pts = cur.points[est.contains_points(cur.points, slack=FLOOR_SIZE)]
    if len(pts) == 0:
        pts = cur.points
    return displacement_fraction(pts, prev_cloud, cfg.disp_thresh) > cfg.disp_majority


def classify_dynamic(track: Track, cur: Obstacle3D, prev_cloud, visual2d, cam, body_pose, cfg: TrackConfig) -> MotionClass:
    """Record this frame's verdict and return the k-of-n vote."""
    track.dynamic_votes.append(frame_verdict(track, cur, prev_cloud, visual2d, cam, body_pose, cfg))
    track.motion_class = "dynamic" if sum(track.dynamic_votes) >= cfg.vote_k else "static"
    return track.motion_class


# --- tracker ---------------------------------------------------------------------


@dataclass
class TrackedObstacle:
    id: int
    box: AABB3
    velocity: np.ndarray
    motion_class: MotionClass
    source: str
    stamp: float


class Tracker:
    """Stateful frame-by-frame tracker. Frames must arrive in stamp order."""

    def __init__(self, cfg: TrackConfig | None = None):
        self.cfg = cfg or TrackConfig()
        self.tracks: list[Track] = []
        self.next_id = 0
        self.clouds: deque = deque(maxlen=self.cfg.disp_lag_frames)

    def _prev_cloud(self) -> np.ndarray | None:
        return self.clouds[0] if self.clouds else None

    def _spawn(self, det: Obstacle3D) -> Track:
        cfg = self.cfg
        entry = HistoryEntry(det.box, det.points, det.stamp, feature_vec(det))
        track = Track(
            self.next_id,
            init_state(det.box.center, det.stamp, cfg),
            deque([entry], maxlen=cfg.history_len),
            dynamic_votes=deque(maxlen=cfg.vote_n),
        )
        self.next_id += 1
        return track

    def step(
        self,
        detections: list[Obstacle3D],
        stamp: float,
        scene_cloud: np.ndarray | None = None,
        visual2d: list[Box2D] | None = None,
        cam: CameraModel | None = None,
        body_pose: Pose | None = None,
    ) -> list[TrackedObstacle]:
        """Associate, filter, classify, spawn and retire; returns one record per detection.

        ``scene_cloud`` is this frame's world-frame cloud; it becomes the reference for the
        displacement check ``disp_lag_frames`` frames later.
        """
        cfg = self.cfg
        visual2d = visual2d or []
        prev_cloud = self._prev_cloud()
        pairs = associate(self.tracks, detections, cfg)

        survivors: list[Track] = []
        out: list[tuple[Track, Obstacle3D]] = []
        for ti, dj in pairs:
            if dj is None:
                track = self.tracks[ti]
                track.misses += 1
                if track.misses < cfg.retire_after:
                    survivors.append(track)
                continue
            det = detections[dj]
            if ti is None:
                track = self._spawn(det)
            else:
                track = self.tracks[ti]
                dt = stamp - track.state.stamp
                hist = [(h.stamp, h.box.center) for h in track.history]
                track.state = kf_update(kf_predict(track.state, dt, cfg), det.box.center, hist, cfg)
                track.history.append(HistoryEntry(det.box, det.points, stamp, feature_vec(det)))
                track.misses = 0
            classify_dynamic(track, det, prev_cloud, visual2d, cam, body_pose, cfg)
            survivors.append(track)
            out.append((track, det))

        self.tracks = sorted(survivors, key=lambda t: t.id)
        if scene_cloud is not None:
            self.clouds.append(np.asarray(scene_cloud, dtype=float))
        out.sort(key=lambda td: td[0].id)
        return [
            TrackedObstacle(t.id, d.box, t.state.velocity.copy(), t.motion_class, d.source, stamp)
            for t, d in out
        ]


def step(tracker: Tracker, fused: list[Obstacle3D], visual2d, stamp: float, scene_cloud=None, cam=None, body_pose=None):
    """Functional alias for :meth:`Tracker.step`."""
    return tracker.step(fused, stamp, scene_cloud, visual2d, cam, body_pose)
