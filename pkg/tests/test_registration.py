import numpy as np
import pytest

from depthbench.geom import RigidTransform, apply, compose
from depthbench.meshio import CorrespondenceSet, PoseLog
from depthbench.registration import (build_chain, fit_rigid_svd,
                                     interpolate_pose, solve_kine)

from conftest import random_transform, rot_z


def make_corr(rng, transform, n=6, sigma=0.0):
    """Camera-frame points drawn at random; organ side generated by the
    known transform (the fit should recover it)."""
    cam = rng.uniform(-0.2, 0.2, (n, 3))
    organ = apply(transform, cam)
    if sigma > 0:
        organ = organ + rng.normal(0, sigma, organ.shape)
    return CorrespondenceSet(np.arange(n), organ, cam)


def rotation_angle(r):
    # small-angle-stable: ||R - I||_F = 2 sqrt(2) sin(theta/2) ~ sqrt(2) theta
    return float(np.linalg.norm(r - np.eye(3)) / np.sqrt(2.0))


def test_recovers_known_transform(rng):
    for _ in range(200):
        t = random_transform(rng, scale=0.5)
        res = fit_rigid_svd(make_corr(rng, t))
        err_rot = rotation_angle(res.transform.rotation @ t.rotation.T)
        err_tr = np.linalg.norm(res.transform.translation - t.translation)
        assert err_rot < 1e-9
        assert err_tr < 1e-9
        assert res.rms < 1e-9
        assert res.method == "pins"
        assert res.n_points == 6


def test_identical_sets_give_identity(rng):
    pts = rng.uniform(-1, 1, (8, 3))
    res = fit_rigid_svd(CorrespondenceSet(np.arange(8), pts, pts.copy()))
    assert np.abs(res.transform.matrix() - np.eye(4)).max() <= 1e-12
    assert res.rms <= 1e-12


def test_too_few_pins_rejected(rng):
    t = random_transform(rng)
    with pytest.raises(ValueError, match="insufficient correspondences"):
        fit_rigid_svd(make_corr(rng, t, n=3))


def test_collinear_pins_rejected(rng):
    cam = np.outer(np.linspace(0, 1, 6), np.array([1.0, 2.0, 3.0]))
    corr = CorrespondenceSet(np.arange(6), cam + [0.1, 0.0, 0.0], cam)
    with pytest.raises(ValueError, match="degenerate geometry"):
        fit_rigid_svd(corr)


def test_reflection_guard(rng):
    # mirrored targets: the best proper rotation must still have det +1
    for _ in range(50):
        cam = rng.uniform(-1, 1, (6, 3))
        organ = cam * np.array([1.0, 1.0, -1.0])
        res = fit_rigid_svd(CorrespondenceSet(np.arange(6), organ, cam))
        assert abs(np.linalg.det(res.transform.rotation) - 1.0) <= 1e-9


def test_residual_invariant_under_common_transform(rng):
    t = random_transform(rng)
    corr = make_corr(rng, t, n=10, sigma=0.01)
    base = fit_rigid_svd(corr).rms
    extra = random_transform(rng)
    moved = CorrespondenceSet(corr.pin_ids,
                              apply(extra, corr.organ_points),
                              apply(extra, corr.camera_points))
    assert abs(fit_rigid_svd(moved).rms - base) <= 1e-9


def test_rms_monotone_in_noise(rng):
    sigmas = [1e-4, 3e-4, 1e-3, 3e-3]
    mean_rms = []
    for sigma in sigmas:
        acc = 0.0
        for s in range(100):
            local = np.random.default_rng(1000 + s)
            t = random_transform(local, scale=0.3)
            acc += fit_rigid_svd(make_corr(local, t, n=12, sigma=sigma)).rms
        mean_rms.append(acc / 100)
    assert all(a < b for a, b in zip(mean_rms, mean_rms[1:]))


# ---------------------------------------------------------------------------
# pose interpolation
# ---------------------------------------------------------------------------

def simple_log():
    t0 = RigidTransform(np.eye(3), np.array([0.0, 0.0, 0.0]))
    t1 = RigidTransform(rot_z(np.pi / 2), np.array([1.0, 0.0, 0.0]))
    return PoseLog(np.array([0.0, 1.0]), [t0, t1])


def test_interpolate_at_sample_is_exact():
    log = simple_log()
    out = interpolate_pose(log, 1.0)
    assert out is log.transforms[1]


def test_interpolate_translation_midpoint():
    a = RigidTransform(np.eye(3), np.array([0.0, 2.0, 0.0]))
    b = RigidTransform(np.eye(3), np.array([4.0, 0.0, 2.0]))
    log = PoseLog(np.array([0.0, 2.0]), [a, b])
    out = interpolate_pose(log, 1.0)
    assert np.allclose(out.translation, [2.0, 1.0, 1.0])
    assert np.allclose(out.rotation, np.eye(3))


def test_interpolate_rotation_midpoint_slerp():
    out = interpolate_pose(simple_log(), 0.5)
    assert np.abs(out.rotation - rot_z(np.pi / 4)).max() <= 1e-9


def test_interpolate_out_of_range():
    log = simple_log()
    with pytest.raises(ValueError, match="outside"):
        interpolate_pose(log, -0.1)
    with pytest.raises(ValueError, match="outside"):
        interpolate_pose(log, 1.1)


# ---------------------------------------------------------------------------
# kinematic chain
# ---------------------------------------------------------------------------

def test_chain_identity_case():
    log = PoseLog(np.array([0.0]), [RigidTransform.identity()])
    chain = build_chain(0.0, RigidTransform.identity(), log)
    assert np.allclose(chain.camera_to_arm.matrix(), np.eye(4))
    assert np.allclose(chain.tray_to_organ.matrix(), np.eye(4))


def test_chain_pure_translation_hand_composed():
    # T_pins = I, T_AT = translation d  =>  T_CA = translation -d
    d = np.array([0.1, -0.2, 0.05])
    log = PoseLog(np.array([0.0]), [RigidTransform(np.eye(3), d)])
    chain = build_chain(0.0, RigidTransform.identity(), log)
    assert np.allclose(chain.camera_to_arm.translation, -d)


def test_chain_closure_defining_identity(rng):
    t_pins = random_transform(rng)
    t_at = random_transform(rng)
    log = PoseLog(np.array([0.0]), [t_at])
    chain = build_chain(0.0, t_pins, log)
    closed = compose(chain.camera_to_arm, t_at)
    assert np.abs(closed.matrix() - t_pins.matrix()).max() <= 1e-10


def test_solve_kine_at_anchor_equals_pins(rng):
    for _ in range(100):
        t_pins = random_transform(rng)
        log = PoseLog(np.array([0.0, 1.0, 2.0]),
                      [random_transform(rng) for _ in range(3)])
        t_p = float(rng.uniform(0, 2))
        chain = build_chain(t_p, t_pins, log)
        res = solve_kine(chain, t_p, log)
        assert np.abs(res.transform.matrix() - t_pins.matrix()).max() <= 1e-10
        assert res.method == "kine"


def test_solve_kine_tracks_arm_translation(rng):
    # arm translates by d between t_p and t_k: T_CO shifts accordingly
    t_pins = random_transform(rng)
    d = np.array([0.0, 0.05, 0.02])
    at0 = RigidTransform.identity()
    at1 = RigidTransform(np.eye(3), d)
    log = PoseLog(np.array([0.0, 1.0]), [at0, at1])
    chain = build_chain(0.0, t_pins, log)
    res = solve_kine(chain, 1.0, log)
    expected = compose(t_pins, at1)  # T_CA = T_pins here since T_AT(t_p)=I
    assert np.abs(res.transform.matrix() - expected.matrix()).max() <= 1e-10


def test_solve_kine_out_of_log_range(rng):
    log = PoseLog(np.array([0.0]), [RigidTransform.identity()])
    chain = build_chain(0.0, RigidTransform.identity(), log)
    with pytest.raises(ValueError, match="outside"):
        solve_kine(chain, 5.0, log)


def test_chain_carries_anchor_fit_quality(rng):
    t = random_transform(rng)
    fit = fit_rigid_svd(make_corr(rng, t, n=7, sigma=1e-4))
    log = PoseLog(np.array([0.0]), [RigidTransform.identity()])
    chain = build_chain(0.0, fit, log)
    res = solve_kine(chain, 0.0, log)
    assert res.rms == fit.rms
    assert res.n_points == 7
