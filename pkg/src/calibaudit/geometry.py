"""Rigid-body geometry: axis-angle rotations and frame poses.

Rotations are parametrized by a 3-vector whose direction is the rotation
axis and whose norm is the angle in radians (Rodrigues / rotation-vector
form). This keeps the pose block at 6 unconstrained parameters inside
least squares.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_SMALL_ANGLE = 1e-8


def _hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric cross-product matrix of a 3-vector."""
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def rotation_matrix(rotvec: np.ndarray) -> np.ndarray:
    """Rodrigues formula: axis-angle vector -> 3x3 rotation matrix."""
    rotvec = np.asarray(rotvec, dtype=float)
    angle = np.linalg.norm(rotvec)
    K = _hat(rotvec)
    if angle < _SMALL_ANGLE:
        # second-order series keeps the result orthonormal to ~1e-16
        return np.eye(3) + K + 0.5 * (K @ K)
    s = np.sin(angle) / angle
    c = (1.0 - np.cos(angle)) / (angle * angle)
    return np.eye(3) + s * K + c * (K @ K)


def rotation_vector(R: np.ndarray) -> np.ndarray:
    """Inverse Rodrigues: rotation matrix -> axis-angle vector.

    Handles the angle ~ 0 and angle ~ pi branches explicitly.
    """
    R = np.asarray(R, dtype=float)
    cos_angle = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    angle = np.arccos(cos_angle)
    axis_times_2sin = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if angle < 1e-7:
        return 0.5 * axis_times_2sin
    if angle > np.pi - 1e-5:
        # axis from the dominant column of (R + I) / 2; signs from off-diagonals
        A = 0.5 * (R + np.eye(3))
        axis = np.sqrt(np.clip(np.diag(A), 0.0, None))
        k = int(np.argmax(axis))
        if axis[k] > 0:
            axis = A[:, k] / axis[k]
            axis /= np.linalg.norm(axis)
        # resolve the overall sign so that small deviations from pi stay continuous
        if angle < np.pi and np.dot(axis, axis_times_2sin) < 0:
            axis = -axis
        return angle * axis
    return (angle / (2.0 * np.sin(angle))) * axis_times_2sin


def rotate_jacobian(rotvec: np.ndarray) -> np.ndarray:
    """Derivatives of R(rotvec) as a (3, 3, 3) array: out[i] = dR/d rotvec_i.

    Closed form valid for any angle; at the origin dR/dr_i reduces to the
    generator [e_i]_x.
    """
    rotvec = np.asarray(rotvec, dtype=float)
    angle_sq = float(rotvec @ rotvec)
    out = np.empty((3, 3, 3))
    if angle_sq < _SMALL_ANGLE**2:
        for i in range(3):
            e = np.zeros(3)
            e[i] = 1.0
            out[i] = _hat(e)
        return out
    R = rotation_matrix(rotvec)
    K = _hat(rotvec)
    I = np.eye(3)
    for i in range(3):
        e = np.zeros(3)
        e[i] = 1.0
        out[i] = ((rotvec[i] * K + _hat(np.cross(rotvec, (I - R) @ e))) / angle_sq) @ R
    return out


@dataclass(frozen=True)
class Pose:
    """Rigid transform taking target/world points into the camera frame."""

    rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3).copy())
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3).copy())
        self.rotation.flags.writeable = False
        self.translation.flags.writeable = False

    @property
    def matrix(self) -> np.ndarray:
        return rotation_matrix(self.rotation)

    def as_vector(self) -> np.ndarray:
        """6-vector (rotation, translation) used as a parameter block."""
        return np.concatenate([self.rotation, self.translation])

    @staticmethod
    def from_vector(v: np.ndarray) -> "Pose":
        v = np.asarray(v, dtype=float).reshape(6)
        return Pose(v[:3], v[3:])

    @staticmethod
    def from_matrix(R: np.ndarray, t: np.ndarray) -> "Pose":
        return Pose(rotation_vector(R), np.asarray(t, dtype=float))


def transform(pose: Pose, points: np.ndarray) -> np.ndarray:
    """Apply R x + t to one point (3,) or a stack (..., 3)."""
    points = np.asarray(points, dtype=float)
    return points @ pose.matrix.T + pose.translation


def inverse(pose: Pose) -> Pose:
    """Pose mapping camera-frame points back to the original frame."""
    R = pose.matrix
    return Pose(-pose.rotation, -(R.T @ pose.translation))


def transform_jacobians(pose: Pose, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Derivatives of R x + t for a stack of points (n, 3).

    Returns (d/d rotvec, d/d t) with shapes (n, 3, 3); the translation
    Jacobian is identity for every point.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    dR = rotate_jacobian(pose.rotation)  # (3, 3, 3), index i = param
    # d(Rx)/dr_i = dR[i] @ x  -> arrange as (n, 3 rows, 3 params)
    J_rot = np.einsum("ijk,nk->nji", dR, points)
    J_t = np.broadcast_to(np.eye(3), (points.shape[0], 3, 3))
    return J_rot, J_t
