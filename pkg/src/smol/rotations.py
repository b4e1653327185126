"""Quaternion and rotation-matrix helpers.

Quaternions are stored scalar-first as ``(q0, q1, q2, q3)``.
"""
from __future__ import annotations

import numpy as np

QUAT_RENORM_TOL = 1e-6
QUAT_REJECT_TOL = 1e-3


class InvalidQuaternionError(ValueError):
    pass


def normalize_quaternion(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0.0:
        raise InvalidQuaternionError(f"quaternion has zero or non-finite norm: {q}")
    return q / n


def quat_rotation_matrix(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion (scalar first).

    Quaternions within ``QUAT_REJECT_TOL`` of unit norm are renormalized;
    anything further off raises :class:`InvalidQuaternionError`.
    """
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if abs(n - 1.0) > QUAT_REJECT_TOL:
        raise InvalidQuaternionError(f"|q| = {n:.6g} is not a unit quaternion")
    if n != 1.0:
        q = q / n
    q0, q1, q2, q3 = q
    return 2.0 * np.array(
        [
            [0.5 - q2 * q2 - q3 * q3, q1 * q2 - q3 * q0, q1 * q3 + q2 * q0],
            [q1 * q2 + q3 * q0, 0.5 - q1 * q1 - q3 * q3, q2 * q3 - q1 * q0],
            [q1 * q3 - q2 * q0, q2 * q3 + q1 * q0, 0.5 - q1 * q1 - q2 * q2],
        ]
    )


def rot_y(theta: float) -> np.ndarray:
    """Right-handed rotation about the y-axis."""
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product ``a * b`` (apply ``b`` first, then ``a``)."""
    a0, a1, a2, a3 = a
    b0, b1, b2, b3 = b
    return np.array(
        [
            a0 * b0 - a1 * b1 - a2 * b2 - a3 * b3,
            a0 * b1 + a1 * b0 + a2 * b3 - a3 * b2,
            a0 * b2 - a1 * b3 + a2 * b0 + a3 * b1,
            a0 * b3 + a1 * b2 - a2 * b1 + a3 * b0,
        ]
    )


def quat_conjugate(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_from_matrix(R) -> np.ndarray:
    """Unit quaternion (q0 >= 0) for a proper rotation matrix."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = normalize_quaternion(q)
    return q if q[0] >= 0 else -q


def quat_angle_between(a, b) -> float:
    """Smallest rotation angle (rad) taking orientation ``a`` to ``b``."""
    d = abs(float(np.dot(normalize_quaternion(a), normalize_quaternion(b))))
    return 2.0 * np.arccos(min(1.0, d))


def twist_angle(q, axis) -> float:
    """Signed rotation angle of ``q`` about ``axis`` (swing-twist split)."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    q = normalize_quaternion(q)
    angle = 2.0 * np.arctan2(float(np.dot(q[1:], axis)), q[0])
    return float(np.angle(np.exp(1j * angle)))
