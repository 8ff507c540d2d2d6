from __future__ import annotations

from collections import deque

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dynobs.geometry import AABB3, Box2D, CameraModel, Pose, project_to_image
from dynobs.lidar_detect import LidarConfig, Obstacle3D, detect_lidar
from dynobs.synth import LidarModel, SceneObject, SceneSpec, Trajectory, render_lidar
from dynobs.tracking import (
    FEATURE_SCALE_FLOOR,
    HistoryEntry,
    KalmanState,
    Track,
    TrackConfig,
    Tracker,
    associate,
    classify_dynamic,
    feature_vec,
    frame_verdict,
    init_state,
    kf_predict,
    kf_update,
    similarity_matrix,
)

from oracles import ca_trajectory

CAM = CameraModel.forward_facing(220.0, 220.0, 160.0, 120.0, 320, 240)
BODY = Pose.from_xyz_yaw(0.0, 0.0, 0.8)


def box_obstacle(center, size=(0.5, 0.5, 1.7), n=80, seed=0, source="fused"):
    rng = np.random.default_rng(seed)
    c, s = np.asarray(center, float), np.asarray(size, float)
    pts = rng.uniform(c - s / 2, c + s / 2, (n, 3))
    return Obstacle3D(AABB3(c, s), pts, source)


def state(x, P=None, stamp=0.0):
    return KalmanState(np.asarray(x, float), np.eye(9) if P is None else P, stamp)


# --- features --------------------------------------------------------------------


def test_feature_unit_cube_corners():
    corners = AABB3(np.zeros(3), np.ones(3)).corners()
    f = feature_vec(Obstacle3D.from_points(corners))
    np.testing.assert_allclose(f, [0, 0, 0, 1, 1, 1, 8, 0.5, 0.5, 0.5])


def test_feature_single_point():
    f = feature_vec(Obstacle3D.from_points([[1.0, 2.0, 3.0]]))
    np.testing.assert_allclose(f[3:], [0.01, 0.01, 0.01, 1, 0, 0, 0])


@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3))
def test_feature_translation_equivariant(t):
    o = box_obstacle([1, 2, 1])
    moved = Obstacle3D.from_points(o.points + t)
    a, b = feature_vec(Obstacle3D.from_points(o.points)), feature_vec(moved)
    np.testing.assert_allclose(b[:3], a[:3] + t, atol=1e-9)
    np.testing.assert_allclose(b[3:], a[3:], atol=1e-9)


# --- Kalman ----------------------------------------------------------------------

CFG = TrackConfig()


def test_predict_examples():
    assert np.all(kf_predict(state(np.zeros(9)), 0.1, CFG).x == 0)
    x = np.zeros(9)
    x[3] = 1.0
    assert kf_predict(state(x), 0.1, CFG).x[0] == pytest.approx(0.1)
    x = np.zeros(9)
    x[6] = 2.0
    out = kf_predict(state(x), 0.5, CFG).x
    assert out[0] == pytest.approx(0.25) and out[3] == pytest.approx(1.0)


@given(st.lists(st.floats(-5, 5), min_size=9, max_size=9), st.floats(0.01, 2.0))
def test_two_half_predicts_equal_one(x, dt):
    s = state(x)
    a = kf_predict(kf_predict(s, dt / 2, CFG), dt / 2, CFG)
    b = kf_predict(s, dt, CFG)
    np.testing.assert_allclose(a.x, b.x, atol=1e-9)


def test_huge_measurement_noise_keeps_prediction():
    cfg = TrackConfig(r_pos=1e12, r_vel=1e12, r_acc=1e12)
    s = kf_predict(init_state([1.0, 2.0, 3.0], 0.0, cfg), 0.1, cfg)
    s = KalmanState(s.x, np.eye(9), s.stamp)
    u = kf_update(s, [50.0, -50.0, 9.0], [(0.0, np.zeros(3)), (0.05, np.ones(3))], cfg)
    np.testing.assert_allclose(u.x, s.x, atol=1e-6)


def run_filter(traj, stamps, cfg):
    s = init_state(traj(stamps[0]), stamps[0], cfg)
    hist = [(stamps[0], traj(stamps[0]))]
    for t in stamps[1:]:
        s = kf_update(kf_predict(s, t - s.stamp, cfg), traj(t), hist, cfg)
        hist.append((t, traj(t)))
    return s


def test_noise_free_constant_acceleration_tracked():
    p0, v0, a = np.array([1.0, -2.0, 0.5]), np.array([0.8, 0.3, 0.0]), np.array([0.4, -0.2, 0.1])
    cfg = TrackConfig(q_pos=1e-12, q_vel=1e-12, q_acc=1e-12)
    stamps = np.arange(11) * 0.1
    s = run_filter(lambda t: ca_trajectory(p0, v0, a, t), stamps, cfg)
    assert np.linalg.norm(s.position - ca_trajectory(p0, v0, a, stamps[-1])) < 1e-3


def test_stationary_velocity_converges():
    s = run_filter(lambda t: np.array([2.0, 1.0, 0.5]), np.arange(11) * 0.1, CFG)
    assert np.linalg.norm(s.velocity) < 1e-3


def test_covariance_symmetric_psd_random_steps():
    rng = np.random.default_rng(9)
    s = init_state(np.zeros(3), 0.0, CFG)
    hist: deque = deque(maxlen=5)
    for _ in range(10_000):
        if rng.random() < 0.5 or not hist:
            obs = rng.normal(size=3)
            s = kf_predict(s, float(rng.uniform(0.01, 0.5)), CFG)
            s = kf_update(s, obs, list(hist), CFG)
            hist.append((s.stamp, obs))
        else:
            s = kf_predict(s, float(rng.uniform(0.01, 0.5)), CFG)
        assert np.abs(s.P - s.P.T).max() < 1e-9
        assert np.linalg.eigvalsh(s.P).min() > -1e-9


# --- association -------------------------------------------------------------------


def make_track(tid, det: Obstacle3D, stamp=0.0) -> Track:
    entry = HistoryEntry(det.box, det.points, stamp, feature_vec(det))
    return Track(tid, init_state(det.box.center, stamp, CFG), deque([entry], maxlen=5), dynamic_votes=deque(maxlen=5))


def test_associate_empty_and_identity():
    d = [box_obstacle([3, 0, 0.85])]
    assert associate([], d, CFG) == [(None, 0)]
    pairs = associate([make_track(0, d[0])], d, CFG)
    assert pairs == [(0, 0)]
    assert similarity_matrix(np.array([feature_vec(d[0])]), np.array([feature_vec(d[0])]), CFG.sim_weights)[0, 0] == pytest.approx(1.0)


def test_swapped_cubes_beyond_gate_spawn():
    a, b = box_obstacle([3, 0, 0.85], seed=1), box_obstacle([3, 3, 0.85], seed=2)
    tracks = [make_track(0, a), make_track(1, b)]
    # detections: same objects moved beyond the gate into each other's old places... and further
    moved = [box_obstacle([6, 3, 0.85], seed=1), box_obstacle([6, 0, 0.85], seed=2)]
    pairs = associate(tracks, moved, CFG)
    assert sorted(p for p in pairs if p[0] is None) == [(None, 0), (None, 1)]


def random_scene(seed):
    rng = np.random.default_rng(seed)
    tracks = [make_track(k, box_obstacle(rng.uniform([-5, -5, 0.8], [5, 5, 1.0]), rng.uniform(0.3, 1.0, 3), seed=k)) for k in range(rng.integers(0, 6))]
    dets = []
    for k, t in enumerate(tracks):
        if rng.random() < 0.8:
            dets.append(box_obstacle(t.last.box.center + rng.normal(0, 0.1, 3), t.last.box.size, seed=100 + k))
    dets += [box_obstacle(rng.uniform([-5, -5, 0.8], [5, 5, 1.0]), seed=200 + k) for k in range(rng.integers(0, 3))]
    return tracks, dets, rng


@given(st.integers(0, 10_000))
def test_association_partial_injection(seed):
    tracks, dets, _ = random_scene(seed)
    pairs = associate(tracks, dets, CFG)
    matched = [(i, j) for i, j in pairs if i is not None and j is not None]
    assert len({i for i, _ in matched}) == len(matched)
    assert sorted(j for _, j in pairs if j is not None) == list(range(len(dets)))
    assert sorted(i for i, _ in pairs if i is not None) == list(range(len(tracks)))


@given(st.integers(0, 10_000))
def test_association_permutation_invariant(seed):
    tracks, dets, rng = random_scene(seed)
    perm = rng.permutation(len(dets))
    a = {(i, j) for i, j in associate(tracks, dets, CFG) if j is not None}
    b = {(i, int(perm[j])) for i, j in associate(tracks, [dets[k] for k in perm], CFG) if j is not None}
    assert a == b


@given(st.integers(0, 10_000), st.floats(0.01, 100.0))
def test_weight_scaling_invariant(seed, c):
    tracks, dets, rng = random_scene(seed)
    w = rng.uniform(0.1, 2.0, 10)
    a = associate(tracks, dets, TrackConfig(sim_weights=tuple(w)))
    b = associate(tracks, dets, TrackConfig(sim_weights=tuple(c * w)))
    assert a == b


def test_scale_floor_shape():
    assert FEATURE_SCALE_FLOOR.shape == (10,) and np.all(FEATURE_SCALE_FLOOR > 0)


# --- classification ----------------------------------------------------------------


def moving_track(velocity, det):
    t = make_track(0, det)
    t.state.x[3:6] = velocity
    return t


def test_static_wall_is_static():
    wall = box_obstacle([4, 0, 1], (0.2, 3.0, 2.0), n=400)
    tracker = Tracker()
    for k in range(6):
        out = tracker.step([wall], 0.1 * k, wall.points)
    assert out[0].motion_class == "static"


def test_stationary_person_with_2d_box_is_dynamic():
    person = box_obstacle([3, 0.6, 0.85], n=200)
    b = project_to_image(person.box, CAM, BODY)
    det2d = [Box2D(b.u_min, b.v_min, b.u_max, b.v_max, "person", 0.9)]
    tracker = Tracker()
    for k in range(5):
        out = tracker.step([person], 0.1 * k, person.points, det2d, CAM, BODY)
    assert out[0].motion_class == "dynamic"
    assert np.linalg.norm(out[0].velocity) < 0.05


def walker_scene(speed=1.0, duration=4.0):
    walker = SceneObject("box", (0.5, 0.5, 1.7), Trajectory.const_acc([2.0, 2.0, 0.85], [speed, 0.0, 0.0], [0.0, 0.0, 0.0]))
    return SceneSpec(duration=duration, rate=10.0, dynamics=[walker], lidar=LidarModel(noise_sigma=0.0))


def run_lidar_tracker(scene, cfg=None):
    tracker = Tracker(cfg)
    outs = []
    for t in scene.stamps:
        body = scene.body_pose(t)
        scan = render_lidar(scene, t)
        dets = detect_lidar(scan, body.compose(scene.lidar.extrinsic), LidarConfig(), stamp=t)
        cloud = np.vstack([d.points for d in dets]) if dets else np.zeros((0, 3))
        outs.append(tracker.step(dets, float(t), cloud))
    return outs


def test_walker_dynamic_by_velocity_and_displacement():
    outs = run_lidar_tracker(walker_scene(duration=2.0))
    assert all(len(o) == 1 for o in outs)
    assert [o[0].motion_class for o in outs[8:]] == ["dynamic"] * len(outs[8:])


def test_constant_velocity_target_keeps_id():
    outs = run_lidar_tracker(walker_scene(duration=3.0))
    assert len(outs) >= 30
    assert {o[0].id for o in outs[:30]} == {0}
    # steady-state window, after the filter has settled
    err = [np.linalg.norm(o[0].velocity - [1.0, 0.0, 0.0]) for o in outs[10:30]]
    assert np.sqrt(np.mean(np.square(err))) < 0.1


def test_crossing_targets_keep_ids():
    # two targets of different size on perpendicular paths, crossing 0.8 s apart
    tracker = Tracker()
    ids = {0: set(), 1: set()}
    for k in range(40):
        t = 0.1 * k
        a = box_obstacle([t, 0.0, 0.85], (0.5, 0.5, 1.7), n=120, seed=k)
        b = box_obstacle([2.0, t - 2.8, 0.75], (0.9, 0.9, 1.5), n=200, seed=1000 + k)
        out = tracker.step([a, b], t)
        for o in out:
            ids[0 if o.box.size[0] < 0.7 else 1].add(o.id)
    assert ids == {0: {0}, 1: {1}}


def test_tracks_retire_after_misses():
    tracker = Tracker(TrackConfig(retire_after=3))
    tracker.step([box_obstacle([3, 0, 0.85])], 0.0)
    for k in range(1, 4):
        tracker.step([], 0.1 * k)
    assert tracker.tracks == []


@given(st.integers(0, 10_000), st.floats(0.0, 1.0), st.floats(0.0, 0.3))
def test_classification_monotone_in_thresholds(seed, dv, dd):
    rng = np.random.default_rng(seed)
    det = box_obstacle(rng.uniform([2, -2, 0.85], [6, 2, 0.85]), seed=seed)
    prev = det.points - rng.uniform(-0.4, 0.4, 3)
    track = moving_track(rng.uniform(-1.5, 1.5, 3), det)
    base = TrackConfig(vel_thresh=float(rng.uniform(0, 1)), disp_thresh=float(rng.uniform(0.01, 0.3)))
    stricter = TrackConfig(vel_thresh=base.vel_thresh + dv, disp_thresh=base.disp_thresh + dd)
    if not frame_verdict(track, det, prev, [], None, None, base):
        assert not frame_verdict(track, det, prev, [], None, None, stricter)


def test_vote_needs_k_of_n():
    det = box_obstacle([3, 0, 0.85])
    track = moving_track([1.0, 0, 0], det)
    prev = det.points - [0.5, 0, 0]
    cfg = TrackConfig(vote_k=3, vote_n=5)
    classes = [classify_dynamic(track, det, prev, [], None, None, cfg) for _ in range(3)]
    assert classes == ["static", "static", "dynamic"]
