"""Rigid-body geometry primitives shared by the whole pipeline.

Points are plain numpy float64 arrays of shape (3,) (or (N, 3) for
batches), always in meters. Rotations are stored as 3x3 matrices;
quaternions appear only at I/O boundaries (pose logs) and are converted
on entry.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ORTHO_TOL = 1e-9          # construction-time orthonormality tolerance
REORTHO_DRIFT = 1e-12     # composition drift that triggers re-orthonormalization


def as_point(p) -> np.ndarray:
    """Coerce to a float64 (3,) point and check finiteness."""
    a = np.asarray(p, dtype=np.float64)
    if a.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("point has non-finite components")
    return a


@dataclass(frozen=True)
class RigidTransform:
    """An element of SE(3): p -> rotation @ p + translation.

    The rotation must be orthonormal (max |R^T R - I| <= 1e-9) with
    determinant +1. Arrays are frozen after construction so instances
    can be shared freely across threads.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {r.shape}")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("transform has non-finite entries")
        drift = np.max(np.abs(r.T @ r - np.eye(3)))
        if drift > ORTHO_TOL:
            raise ValueError(f"rotation not orthonormal (drift {drift:.3e})")
        det = np.linalg.det(r)
        if abs(det - 1.0) > ORTHO_TOL:
            raise ValueError(f"rotation determinant {det:.12f} != 1")
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def matrix(self) -> np.ndarray:
        """Homogeneous 4x4 matrix (row-major)."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @staticmethod
    def from_matrix(m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"expected 4x4 matrix, got {m.shape}")
        return RigidTransform(m[:3, :3], m[:3, 3])


def svd3(m) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """SVD of a 3x3 matrix: m = U @ diag(S) @ V.T.

    S is non-negative and descending; U and V are orthonormal.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise ValueError(f"expected 3x3 matrix, got {m.shape}")
    u, s, vt = np.linalg.svd(m)
    return u, s, vt.T


def _orthonormalize(r: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (polar factor, reflection-guarded)."""
    u, _, v = svd3(r)
    d = np.sign(np.linalg.det(u @ v.T))
    return u @ np.diag([1.0, 1.0, d]) @ v.T


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Composition a∘b: apply b first, then a."""
    r = a.rotation @ b.rotation
    t = a.rotation @ b.translation + a.translation
    if np.max(np.abs(r.T @ r - np.eye(3))) > REORTHO_DRIFT:
        r = _orthonormalize(r)
    return RigidTransform(r, t)


def inverse(t: RigidTransform) -> RigidTransform:
    r = t.rotation.T
    return RigidTransform(r, -(r @ t.translation))


def apply(t: RigidTransform, p) -> np.ndarray:
    """Apply t to a (3,) point or an (N, 3) batch."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim == 1:
        return t.rotation @ p + t.translation
    return p @ t.rotation.T + t.translation


def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    """Rotation matrix for a rotation of `angle` radians about `axis`."""
    a = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(a)
    if n == 0:
        raise ValueError("zero rotation axis")
    x, y, z = a / n
    c, s = np.cos(angle), np.sin(angle)
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + s * k + (1.0 - c) * (k @ k)


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix from a unit quaternion in (x, y, z, w) order."""
    x, y, z, w = np.asarray(q, dtype=np.float64)
    n = x * x + y * y + z * z + w * w
    if n == 0:
        raise ValueError("zero quaternion")
    s = 2.0 / n
    return np.array(
        [
            [1 - s * (y * y + z * z), s * (x * y - w * z), s * (x * z + w * y)],
            [s * (x * y + w * z), 1 - s * (x * x + z * z), s * (y * z - w * x)],
            [s * (x * z - w * y), s * (y * z + w * x), 1 - s * (x * x + y * y)],
        ]
    )


def matrix_to_quat(r) -> np.ndarray:
    """Unit quaternion (x, y, z, w) from a rotation matrix, w >= 0."""
    r = np.asarray(r, dtype=np.float64)
    tr = r[0, 0] + r[1, 1] + r[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [(r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s,
             (r[1, 0] - r[0, 1]) / s, 0.25 * s]
        )
    else:
        i = int(np.argmax([r[0, 0], r[1, 1], r[2, 2]]))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(r[i, i] - r[j, j] - r[k, k] + 1.0, 0.0)) * 2.0
        q = np.zeros(4)
        q[i] = 0.25 * s
        q[j] = (r[j, i] + r[i, j]) / s
        q[k] = (r[k, i] + r[i, k]) / s
        q[3] = (r[k, j] - r[j, k]) / s
    if q[3] < 0:
        q = -q
    return q / np.linalg.norm(q)


def slerp_matrix(r0, r1, u: float) -> np.ndarray:
    """Spherical linear interpolation between two rotation matrices."""
    q0 = matrix_to_quat(r0)
    q1 = matrix_to_quat(r1)
    d = float(np.dot(q0, q1))
    if d < 0:
        q1, d = -q1, -d
    d = min(d, 1.0)
    theta = np.arccos(d)
    if theta < 1e-12:
        q = (1.0 - u) * q0 + u * q1
    else:
        q = (np.sin((1.0 - u) * theta) * q0 + np.sin(u * theta) * q1) / np.sin(theta)
    return quat_to_matrix(q / np.linalg.norm(q))
