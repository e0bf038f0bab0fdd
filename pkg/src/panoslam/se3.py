"""Rigid camera-to-world transforms stored as unit quaternion + translation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_QUAT_NORM_TOL = 1e-6


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product of (w, x, y, z) quaternions."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(rot: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (w, x, y, z), Shepperd's method."""
    m = np.asarray(rot, dtype=np.float64)
    tr = np.trace(m)
    if tr > 0.0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array(
            [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        )
    elif m[1, 1] >= m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array(
            [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array(
            [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        )
    return q / np.linalg.norm(q)


def rotvec_to_matrix(w: np.ndarray) -> np.ndarray:
    """Rodrigues formula, numerically safe near zero angle."""
    w = np.asarray(w, dtype=np.float64)
    angle = np.linalg.norm(w)
    if angle < 1e-12:
        k = np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])
        return np.eye(3) + k  # first-order term is exact to O(angle^2)
    axis = w / angle
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def matrix_to_rotvec(rot: np.ndarray) -> np.ndarray:
    q = matrix_to_quat(rot)
    if q[0] < 0:
        q = -q
    half = np.clip(q[0], -1.0, 1.0)
    angle = 2.0 * np.arccos(half)
    s = np.sqrt(max(1.0 - half * half, 0.0))
    if s < 1e-12:
        return 2.0 * q[1:]
    return q[1:] / s * angle


def rotation_angle(rot: np.ndarray) -> float:
    """Angle of a rotation matrix in radians, in [0, pi]."""
    c = np.clip((np.trace(rot) - 1.0) * 0.5, -1.0, 1.0)
    return float(np.arccos(c))


@dataclass(frozen=True)
class PoseSE3:
    """Camera-to-world rigid transform.

    ``quat`` is (w, x, y, z), kept unit norm and with w >= 0 so each rotation
    has one canonical representation. ``trans`` is the camera center in world
    coordinates.
    """

    quat: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    trans: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.quat, dtype=np.float64)
        t = np.asarray(self.trans, dtype=np.float64)
        n = np.linalg.norm(q)
        if abs(n - 1.0) > _QUAT_NORM_TOL:
            raise ValueError(f"quaternion norm {n} too far from 1")
        q = q / n
        if q[0] < 0:
            q = -q
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "quat", q)
        object.__setattr__(self, "trans", t)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls()

    @classmethod
    def from_matrix(cls, mat: np.ndarray) -> "PoseSE3":
        mat = np.asarray(mat, dtype=np.float64)
        return cls(matrix_to_quat(mat[:3, :3]), mat[:3, 3].copy())

    @classmethod
    def from_rt(cls, rot: np.ndarray, trans: np.ndarray) -> "PoseSE3":
        return cls(matrix_to_quat(rot), np.asarray(trans, dtype=np.float64).copy())

    @classmethod
    def from_rotvec(cls, rotvec, trans=(0.0, 0.0, 0.0)) -> "PoseSE3":
        return cls.from_rt(rotvec_to_matrix(np.asarray(rotvec, dtype=np.float64)), trans)

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.quat)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.trans
        return m

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """self applied after other: (self * other)(x) = self(other(x))."""
        q = quat_multiply(self.quat, other.quat)
        t = self.rotation_matrix() @ other.trans + self.trans
        return PoseSE3(q, t)

    def inverse(self) -> "PoseSE3":
        q = self.quat * np.array([1.0, -1.0, -1.0, -1.0])
        rot_t = self.rotation_matrix().T
        return PoseSE3(q, -(rot_t @ self.trans))

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Apply the rigid transform to points of shape (..., 3)."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation_matrix().T + self.trans

    def rotate(self, vecs: np.ndarray) -> np.ndarray:
        """Rotate direction vectors (no translation)."""
        return np.asarray(vecs, dtype=np.float64) @ self.rotation_matrix().T

    def retract(self, delta: np.ndarray) -> "PoseSE3":
        """Right-multiplicative update by a 6-vector (rotvec, translation)."""
        delta = np.asarray(delta, dtype=np.float64)
        return self.compose(PoseSE3.from_rotvec(delta[:3], delta[3:]))


def rotation_error(a: PoseSE3, b: PoseSE3) -> float:
    """Relative rotation angle between two poses, radians."""
    return rotation_angle(a.rotation_matrix().T @ b.rotation_matrix())


def translation_error(a: PoseSE3, b: PoseSE3) -> float:
    return float(np.linalg.norm(a.trans - b.trans))
