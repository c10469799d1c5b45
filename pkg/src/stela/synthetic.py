"""Deterministic synthetic LiDAR sequences for desk-scale experiments.

Scenes are built once in world coordinates: an optional ground plane,
static boxes and moving boxes. Static and moving boxes are drawn from the
same shape and intensity distribution, so a single frame cannot tell them
apart; only their displacement across frames can. Every frame observes the
full point set through its ego pose, so aligned static geometry coincides
exactly between frames.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .geometry import RigidPose

GROUND, STATIC, MOVING = 0, 1, 2
CLASS_NAMES = ("ground", "static-object", "moving-object")


@dataclass(frozen=True)
class SyntheticSpec:
    n_frames: int = 8
    ground: bool = True
    ground_points: int = 1500
    ground_z: float = -1.6
    n_static: int = 6
    n_moving: int = 6
    points_per_box: int = 60
    box_size: float = 1.2
    box_z: float = -0.6
    extent: float = 14.0  # half-width of the square scene area, metres
    min_separation: float = 3.5
    moving_speed: float = 1.5  # metres per frame
    moving_heading: float | None = 0.0  # radians; None draws one per object
    ego_speed: float = 0.5
    ego_yaw_rate: float = 0.0
    intensity: float = 0.4

    @classmethod
    def from_dict(cls, values: dict) -> SyntheticSpec:
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, value in values.items():
            if key not in known:
                raise KeyError(f"unknown synthetic field {key!r}")
            kwargs[key] = value
        return cls(**kwargs)


@dataclass
class PointCloudFrame:
    points: np.ndarray  # (N, 4) x, y, z, intensity in the sensor frame
    labels: np.ndarray  # (N,) training class ids
    pose: RigidPose  # sensor pose in world coordinates


def _box_points(rng, n, size):
    # points on the box surface: pick a face, then a uniform spot on it
    pts = rng.uniform(-0.5, 0.5, size=(n, 3))
    axis = rng.integers(0, 3, size=n)
    side = rng.choice([-0.5, 0.5], size=n)
    pts[np.arange(n), axis] = side
    return pts * size


def _place_centres(rng, count, spec: SyntheticSpec):
    centres: list[np.ndarray] = []
    attempts = 0
    while len(centres) < count:
        attempts += 1
        if attempts > 10000:
            raise RuntimeError("could not place objects; lower the count or separation")
        c = rng.uniform(-spec.extent, spec.extent, size=2)
        if np.hypot(*c) < 3.0:
            continue
        if all(np.hypot(*(c - o)) >= spec.min_separation for o in centres):
            centres.append(c)
    return centres


def make_synthetic_sequence(spec: SyntheticSpec, seed: int) -> list[PointCloudFrame]:
    rng = np.random.default_rng(seed)
    static_parts, static_labels = [], []
    if spec.ground:
        g = np.column_stack([
            rng.uniform(-spec.extent - 4, spec.extent + 4, size=(spec.ground_points, 2)),
            np.full(spec.ground_points, spec.ground_z),
        ])
        static_parts.append(g)
        static_labels.append(np.full(len(g), GROUND))

    centres = _place_centres(rng, spec.n_static + spec.n_moving, spec)
    moving = []
    for i, c in enumerate(centres):
        body = _box_points(rng, spec.points_per_box, spec.box_size)
        body += np.array([c[0], c[1], spec.box_z])
        if i < spec.n_static:
            static_parts.append(body)
            static_labels.append(np.full(len(body), STATIC))
        else:
            heading = spec.moving_heading if spec.moving_heading is not None else rng.uniform(-np.pi, np.pi)
            velocity = spec.moving_speed * np.array([np.cos(heading), np.sin(heading), 0.0])
            moving.append((body, velocity))

    static_xyz = np.concatenate(static_parts) if static_parts else np.zeros((0, 3))
    static_lab = np.concatenate(static_labels) if static_labels else np.zeros(0, dtype=np.int64)

    frames = []
    for t in range(spec.n_frames):
        pose = RigidPose.from_yaw(spec.ego_yaw_rate * t, (spec.ego_speed * t, 0.0, 0.0))
        world = [static_xyz] + [body + t * vel for body, vel in moving]
        labels = [static_lab] + [np.full(len(body), MOVING) for body, _ in moving]
        xyz = pose.inverse().apply(np.concatenate(world))
        points = np.column_stack([xyz, np.full(len(xyz), spec.intensity)])
        frames.append(PointCloudFrame(points, np.concatenate(labels).astype(np.int64), pose))
    return frames
