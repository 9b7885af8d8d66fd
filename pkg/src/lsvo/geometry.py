"""Rigid-body helpers: Euler angles, SE(3) poses, relative motion, trajectories.

Rotations use R = Rz(rz) @ Ry(ry) @ Rx(rx).  Poses are 4x4 float64 arrays in
the KITTI camera frame (x right, y down, z forward).  A motion vector is
``(tx, ty, tz, rx, ry, rz)`` in metres and radians.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

GIMBAL_MARGIN = 1e-9
ORTHO_TOL = 1e-9


class GimbalLockError(ValueError):
    pass


class NonRigidError(ValueError):
    pass


def rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_to_rot(theta: Sequence[float]) -> np.ndarray:
    rx, ry, rz = (float(v) for v in theta)
    return rot_z(rz) @ rot_y(ry) @ rot_x(rx)


def rot_to_euler(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if abs(R[2, 0]) >= 1.0 - GIMBAL_MARGIN:
        raise GimbalLockError(f"pitch at +-90 deg (R[2,0] = {R[2, 0]:.12f}); Euler angles are not unique")
    ry = np.arctan2(-R[2, 0], np.hypot(R[0, 0], R[1, 0]))
    rx = np.arctan2(R[2, 1], R[2, 2])
    rz = np.arctan2(R[1, 0], R[0, 0])
    return np.array([rx, ry, rz])


def make_pose(R: np.ndarray | None = None, t: Sequence[float] | None = None) -> np.ndarray:
    T = np.eye(4)
    if R is not None:
        T[:3, :3] = R
    if t is not None:
        T[:3, 3] = t
    return T


def to_se3(y: Sequence[float]) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (6,):
        raise ValueError(f"motion vector must have 6 entries, got shape {y.shape}")
    return make_pose(euler_to_rot(y[3:]), y[:3])


def from_se3(T: np.ndarray) -> np.ndarray:
    T = np.asarray(T, dtype=np.float64)
    check_pose(T)
    return np.concatenate([T[:3, 3], rot_to_euler(T[:3, :3])])


def pose_defect(T: np.ndarray) -> float:
    """Largest violation of the rigid-pose constraints."""
    R = T[:3, :3]
    ortho = np.max(np.abs(R.T @ R - np.eye(3)))
    det = abs(np.linalg.det(R) - 1.0)
    row = np.max(np.abs(T[3] - np.array([0.0, 0.0, 0.0, 1.0])))
    return float(max(ortho, det, row))


def check_pose(T: np.ndarray, tol: float = ORTHO_TOL) -> None:
    T = np.asarray(T)
    if T.shape != (4, 4):
        raise NonRigidError(f"pose must be 4x4, got {T.shape}")
    d = pose_defect(T)
    if not d < tol:
        raise NonRigidError(f"pose is not rigid (defect {d:.3e} > {tol:.1e})")


def orthonormalize(T: np.ndarray) -> np.ndarray:
    """Project the rotation block onto SO(3) (polar decomposition via SVD)."""
    T = np.array(T, dtype=np.float64)
    U, _, Vt = np.linalg.svd(T[:3, :3])
    R = U @ Vt
    if np.linalg.det(R) < 0:
        U[:, -1] *= -1
        R = U @ Vt
    T[:3, :3] = R
    T[3] = (0.0, 0.0, 0.0, 1.0)
    return T


def invert_pose(T: np.ndarray) -> np.ndarray:
    R, t = T[:3, :3], T[:3, 3]
    return make_pose(R.T, -R.T @ t)


def relative_pose(Ti: np.ndarray, Tj: np.ndarray) -> np.ndarray:
    check_pose(Ti)
    check_pose(Tj)
    return invert_pose(Ti) @ Tj


def compose_trajectory(motions: Iterable[Sequence[float]], T0: np.ndarray | None = None) -> list[np.ndarray]:
    """Chain frame-to-frame motions onto ``T0``; returns ``len(motions) + 1`` poses."""
    T = np.eye(4) if T0 is None else np.array(T0, dtype=np.float64)
    check_pose(T)
    traj = [T]
    for y in motions:
        T = T @ to_se3(y)
        if pose_defect(T) > ORTHO_TOL:
            T = orthonormalize(T)
            check_pose(T)
        traj.append(T)
    return traj


def rotation_angle(R: np.ndarray) -> float:
    """Angle of a rotation in [0, pi].

    Same value as ``arccos((trace - 1) / 2)``, but taken with ``arctan2`` of the
    skew part so that near-identity rotations do not lose half their digits.
    """
    R = np.asarray(R, dtype=np.float64)[:3, :3]
    c = (np.trace(R) - 1.0) / 2.0
    s = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.arctan2(s, c))


def relative_motions(poses: Sequence[np.ndarray], step: int = 1) -> np.ndarray:
    """Motion vectors between poses ``i`` and ``i + step``."""
    return np.array([from_se3(relative_pose(poses[i], poses[i + step])) for i in range(len(poses) - step)]).reshape(-1, 6)
