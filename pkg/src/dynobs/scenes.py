"""Canned synthetic scenes used by the tests, the acceptance suite and ``scripts/``."""

from __future__ import annotations

import numpy as np

from .geometry import CameraModel
from .synth import DetectorModel, LidarModel, SceneObject, SceneSpec, Trajectory

PERSON = (0.5, 0.5, 1.7)


def shuttle(p0, p1, speed: float, duration: float, phase: float = 0.0) -> Trajectory:
    """Back-and-forth walk between ``p0`` and ``p1`` at constant speed.

    ``phase`` (seconds) shifts the start along the loop. Waypoints cover ``[0, duration]``.
    """
    p0, p1 = np.asarray(p0, dtype=float), np.asarray(p1, dtype=float)
    leg = np.linalg.norm(p1 - p0) / speed
    start = -(phase % (2 * leg)) - 2 * leg
    rows, t, k = [], start, 0
    while t <= duration + 2 * leg:
        rows.append([t, *(p0 if k % 2 == 0 else p1)])
        t += leg
        k += 1
    return Trajectory.waypoints(rows)


def person(x, y, size=PERSON) -> np.ndarray:
    return np.array([x, y, size[2] / 2])


def default_camera() -> CameraModel:
    return CameraModel.forward_facing(220.0, 220.0, 160.0, 120.0, 320, 240, (0.1, 0.0, 0.0), depth_min=0.2, depth_max=10.0)


def benchmark_scene(duration: float = 30.0, rate: float = 10.0, seed: int = 0, noise: bool = True) -> SceneSpec:
    """Three static pillars, two walkers and a crossing pair around a stationary robot.

    Walker A, the crossing pair and one pillar are in front of the camera; walker B and
    the other pillars are beside or behind the robot, visible to the LiDAR only. Everyone
    moves at 1 m/s. The layout keeps pillars out of the walkers' lines of sight.
    """
    big = (0.7, 0.7, 1.5)
    statics = [
        SceneObject("box", (0.4, 0.4, 2.0), Trajectory.static([8.0, -1.0, 1.0]), "pillar"),
        SceneObject("cylinder", (0.4, 0.4, 2.0), Trajectory.static([-1.0, 4.5, 1.0]), "pillar"),
        SceneObject("box", (0.4, 0.4, 2.0), Trajectory.static([-2.0, -3.0, 1.0]), "pillar"),
    ]
    # The pair walks the two diagonals of a square a quarter cycle apart, so their
    # paths cross while their centres stay >= 1.2 m apart. Nobody straddles the robot's
    # x or y axis, which keeps two faces of every box in view.
    leg = np.hypot(2.4, 2.4)
    dynamics = [
        SceneObject("box", PERSON, shuttle(person(3.0, -2.0), person(7.0, -2.0), 1.0, duration), "person"),
        SceneObject("box", PERSON, shuttle(person(-3.0, 1.0), person(-3.0, 4.0), 1.0, duration, phase=1.0), "person"),
        SceneObject("box", PERSON, shuttle(person(4.5, 0.8), person(6.9, 3.2), 1.0, duration), "person"),
        SceneObject("box", big, shuttle(person(4.5, 3.2, big), person(6.9, 0.8, big), 1.0, duration, phase=leg / 2), "person"),
    ]
    return SceneSpec(
        duration=duration,
        rate=rate,
        statics=statics,
        dynamics=dynamics,
        robot_trajectory=Trajectory.static([0.0, 0.0, 0.8]),
        lidar=LidarModel(noise_sigma=0.01 if noise else 0.0),
        camera=default_camera(),
        depth_noise_sigma=0.02 if noise else 0.0,
        detector=DetectorModel(dropout=0.05 if noise else 0.0, jitter_px=2.0 if noise else 0.0),
        seed=seed,
    )


def close_pair_scene(seed: int = 0) -> SceneSpec:
    """Two people standing side by side 0.6 m apart (0.1 m gap): close enough that
    clustering merges them into one box, while a 2D detector still sees two people.

    Each 2D box covers about half the merged box in the image, so their IoU with its
    reprojection sits near 0.45-0.55; splitting needs ``iou_thresh_2d`` around 0.4.
    """
    statics = [
        SceneObject("box", PERSON, Trajectory.static(person(3.0, 0.5)), "person"),
        SceneObject("box", PERSON, Trajectory.static(person(3.0, 1.1)), "person"),
    ]
    return SceneSpec(
        duration=0.1,
        rate=10.0,
        statics=statics,
        robot_trajectory=Trajectory.static([0.0, 0.0, 0.8]),
        lidar=LidarModel(noise_sigma=0.0),
        camera=default_camera(),
        seed=seed,
    )
