"""Rigid-body helpers: SO(3) exponential map, camera poses and the
differentiable point transform used when a pose is being optimized."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from . import autodiff as ad

_SMALL_ANGLE = 1e-8


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """Rodrigues' formula; second-order series below 1e-8 rad."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega)
    K = skew(omega)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + np.sin(theta) / theta * K + (1.0 - np.cos(theta)) / theta**2 * K @ K


def so3_log(R: np.ndarray) -> np.ndarray:
    return Rotation.from_matrix(R).as_rotvec()


def so3_right_jacobian(omega: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(omega)
    K = skew(omega)
    if theta < _SMALL_ANGLE:
        return np.eye(3) - 0.5 * K + K @ K / 6.0
    return (
        np.eye(3)
        - (1.0 - np.cos(theta)) / theta**2 * K
        + (theta - np.sin(theta)) / theta**3 * K @ K
    )


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform ``x_world = rotation @ x_cam + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return Pose(T[:3, :3].copy(), T[:3, 3].copy())

    @staticmethod
    def from_tum(values) -> "Pose":
        tx, ty, tz, qx, qy, qz, qw = values
        R = Rotation.from_quat([qx, qy, qz, qw]).as_matrix()
        return Pose(R, np.array([tx, ty, tz], dtype=np.float64))

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def tum(self) -> np.ndarray:
        q = Rotation.from_matrix(self.rotation).as_quat()
        return np.concatenate([self.translation, q])

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        return (
            bool(np.all(np.isfinite(R)) and np.all(np.isfinite(self.translation)))
            and np.allclose(R.T @ R, np.eye(3), atol=tol)
            and abs(np.linalg.det(R) - 1.0) < tol
        )


def twist_to_pose(base: Pose, twist: np.ndarray) -> Pose:
    """Apply a 6-vector (rotation vector, translation increment) on top of ``base``.

    The rotation increment acts about the camera centre:
    ``R = exp(omega) @ R_base`` and ``t = t_base + rho``.
    """
    twist = np.asarray(twist, dtype=np.float64)
    R = so3_exp(twist[:3]) @ base.rotation
    # re-orthonormalize to keep det/orthogonality at machine precision
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    return Pose(R, base.translation + twist[3:])


def transform_points(twist: ad.Var, base: Pose, points_cam: np.ndarray) -> ad.Var:
    """World coordinates of camera-frame points under ``twist_to_pose(base, twist)``,
    differentiable with respect to the twist."""
    omega = twist.value[:3]
    R_inc = so3_exp(omega)
    q = points_cam @ base.rotation.T
    out = q @ R_inc.T + base.translation + twist.value[3:]

    def vjp(g):
        # d(exp(w) q)/dw = -exp(w) [q]x Jr(w)
        Jr = so3_right_jacobian(omega)
        local = g @ R_inc  # R_inc^T g per row
        g_omega = Jr.T @ np.cross(q, local).sum(axis=0)
        return (np.concatenate([g_omega, g.sum(axis=0)]),)

    return twist.tape.record(out, (twist,), vjp)
