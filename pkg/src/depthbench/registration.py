"""Camera-to-world pose estimation.

Two routes: a fiducial-based least-squares rigid fit over pin
correspondences, and a kinematics-based chain that anchors the fiducial
solution at one time and carries it to other times through a tracker
pose log.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geom import RigidTransform, apply, compose, inverse, slerp_matrix, svd3
from .meshio import CorrespondenceSet, PoseLog

MIN_PINS = 4
DEGENERATE_SV = 1e-12  # second singular value of the centered covariance

METHOD_PINS = "pins"
METHOD_KINE = "kine"


@dataclass(frozen=True)
class RegistrationResult:
    """A camera-to-organ transform with its fit quality."""

    transform: RigidTransform   # T_CO: camera frame -> organ frame
    rms: float                  # meters
    method: str                 # "pins" or "kine"
    n_points: int

    def __post_init__(self):
        if self.rms < 0:
            raise ValueError("rms must be non-negative")


@dataclass(frozen=True)
class KinematicChain:
    """Anchored hand-eye chain: T_CA solved at the anchor time from the
    fiducial fit, with tray-to-organ fixed to the identity."""

    camera_to_arm: RigidTransform
    tray_to_organ: RigidTransform
    anchor_time: float
    anchor_rms: float = 0.0
    anchor_n: int = 0


def fit_rigid_svd(corr: CorrespondenceSet) -> RegistrationResult:
    """Least-squares rigid fit mapping camera-frame pins onto their
    ground-truth positions.

    Minimizes sum ||T (cp_i) - op_i||^2 over T in SE(3) via SVD of the
    cross-covariance of the centered point sets, with a determinant
    correction so reflections are never returned.

    Raises ValueError for fewer than 4 pairs or a collinear/degenerate
    configuration.
    """
    n = len(corr)
    if n < MIN_PINS:
        raise ValueError(
            f"insufficient correspondences: {n} < {MIN_PINS} pins")
    src = corr.camera_points
    dst = corr.organ_points
    src_mean = src.mean(axis=0)
    dst_mean = dst.mean(axis=0)
    h = (src - src_mean).T @ (dst - dst_mean) / n
    u, s, v = svd3(h)
    if s[1] < DEGENERATE_SV:
        raise ValueError(
            f"degenerate geometry: second singular value {s[1]:.3e}")
    d = np.sign(np.linalg.det(v @ u.T))
    r = v @ np.diag([1.0, 1.0, d]) @ u.T
    t = dst_mean - r @ src_mean
    transform = RigidTransform(r, t)
    residual = apply(transform, src) - dst
    rms = float(np.sqrt(np.mean(np.sum(residual * residual, axis=1))))
    return RegistrationResult(transform, rms, METHOD_PINS, n)


def interpolate_pose(log: PoseLog, t: float) -> RigidTransform:
    """Pose at time t: linear in translation, spherical in rotation,
    between the bracketing log samples. Exact at sample times."""
    times = log.times
    if t < times[0] or t > times[-1]:
        raise ValueError(
            f"time {t} outside pose log range [{times[0]}, {times[-1]}]")
    i = int(np.searchsorted(times, t))
    if i < len(times) and times[i] == t:
        return log.transforms[i]
    t0, t1 = times[i - 1], times[i]
    u = (t - t0) / (t1 - t0)
    a, b = log.transforms[i - 1], log.transforms[i]
    rot = slerp_matrix(a.rotation, b.rotation, u)
    trans = (1.0 - u) * a.translation + u * b.translation
    return RigidTransform(rot, trans)


def build_chain(t_p: float, pins, pose_log: PoseLog) -> KinematicChain:
    """Anchor the chain at t_p: T_CA = T_pins * I * inverse(T_AT(t_p)).

    `pins` may be the fiducial RegistrationResult or a bare RigidTransform.
    """
    if isinstance(pins, RegistrationResult):
        t_pins, rms, n = pins.transform, pins.rms, pins.n_points
    else:
        t_pins, rms, n = pins, 0.0, 0
    t_at = interpolate_pose(pose_log, t_p)
    t_ca = compose(t_pins, inverse(t_at))
    return KinematicChain(t_ca, RigidTransform.identity(), t_p, rms, n)


def solve_kine(chain: KinematicChain, t_k: float,
               pose_log: PoseLog) -> RegistrationResult:
    """Camera-to-organ at t_k through the chain:
    T_CO(t_k) = T_CA * T_AT(t_k) * I."""
    t_at = interpolate_pose(pose_log, t_k)
    t_co = compose(compose(chain.camera_to_arm, t_at), chain.tray_to_organ)
    return RegistrationResult(t_co, chain.anchor_rms, METHOD_KINE,
                              chain.anchor_n)
