"""Rigid transforms, frame alignment and the Cartesian to cylindrical map.

All geometry runs in float64. Scans are ``(N, 4)`` arrays of
``x, y, z, intensity``; only the first three columns are ever transformed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class RigidPose:
    """SE(3) element ``p -> R @ p + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise ValueError("pose contains non-finite entries")
        if np.abs(rot.T @ rot - np.eye(3)).max() > _ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> RigidPose:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, mat: np.ndarray) -> RigidPose:
        """Build from a 3x4 or 4x4 homogeneous matrix."""
        mat = np.asarray(mat, dtype=np.float64)
        if mat.shape not in ((3, 4), (4, 4)):
            raise ValueError(f"expected 3x4 or 4x4 matrix, got {mat.shape}")
        return cls(mat[:3, :3], mat[:3, 3])

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> RigidPose:
        c, s = np.cos(yaw), np.sin(yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(rot, np.asarray(translation, dtype=np.float64))

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def inverse(self) -> RigidPose:
        rot_t = self.rotation.T
        return RigidPose(rot_t, -rot_t @ self.translation)

    def __matmul__(self, other: RigidPose) -> RigidPose:
        return RigidPose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def apply(self, xyz: np.ndarray) -> np.ndarray:
        xyz = np.asarray(xyz, dtype=np.float64)
        return xyz @ self.rotation.T + self.translation


def align_to_frame(points: np.ndarray, pose_src: RigidPose, pose_dst: RigidPose) -> np.ndarray:
    """Express a scan captured at ``pose_src`` in the sensor frame of ``pose_dst``.

    Args:
        points: ``(N, 4)`` array of ``x, y, z, intensity``.
        pose_src: world pose of the sensor that captured ``points``.
        pose_dst: world pose of the target sensor frame.

    Returns:
        ``(N, 4)`` float64 array; intensity column copied unchanged.
    """
    out = np.array(points, dtype=np.float64, copy=True).reshape(-1, 4)
    relative = pose_dst.inverse() @ pose_src
    out[:, :3] = relative.apply(out[:, :3])
    return out


def to_cylindrical(xyz: np.ndarray) -> np.ndarray:
    """Map ``(..., 3)`` Cartesian points to ``(rho, theta, z)``.

    theta lies in ``[-pi, pi)``; atan2's ``+pi`` is folded onto ``-pi``.
    The origin axis ``(0, 0, z)`` maps to ``rho=0, theta=0``.
    """
    xyz = np.asarray(xyz, dtype=np.float64)
    x, y, z = xyz[..., 0], xyz[..., 1], xyz[..., 2]
    rho = np.hypot(x, y)
    theta = np.arctan2(y, x)
    theta = np.where(theta >= np.pi, theta - 2.0 * np.pi, theta)
    theta = np.where(rho == 0.0, 0.0, theta)
    return np.stack([rho, theta, z], axis=-1)


def from_cylindrical(cyl: np.ndarray) -> np.ndarray:
    cyl = np.asarray(cyl, dtype=np.float64)
    rho, theta, z = cyl[..., 0], cyl[..., 1], cyl[..., 2]
    return np.stack([rho * np.cos(theta), rho * np.sin(theta), z], axis=-1)


def build_point_features(xyz: np.ndarray, cyl: np.ndarray, intensity: np.ndarray) -> np.ndarray:
    """Stack the per-point MLP input ``(x, y, z, rho, theta, intensity)``.

    Accepts a single point or batches with matching leading shapes.
    """
    xyz = np.asarray(xyz, dtype=np.float64)
    cyl = np.asarray(cyl, dtype=np.float64)
    intensity = np.asarray(intensity, dtype=np.float64)
    return np.concatenate([xyz, cyl[..., :2], intensity[..., None]], axis=-1)


def scan_point_features(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cylindrical coordinates and 6-wide features for an ``(N, 4)`` scan."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    cyl = to_cylindrical(points[:, :3])
    return cyl, build_point_features(points[:, :3], cyl, points[:, 3])
