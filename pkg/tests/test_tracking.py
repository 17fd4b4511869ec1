import numpy as np
import pytest

from dronepose.datamodel import Pose6DoF
from dronepose.geometry import geodesic_angle, random_rotation, rotation_error, so3_exp
from dronepose.tracking import kf_init, kf_step, smooth_sequence


def test_init_reads_back_measurement(rng):
    p = Pose6DoF(random_rotation(rng), rng.normal(size=3))
    s = kf_init(p)
    assert np.array_equal(s.position, p.t)
    assert np.linalg.norm(s.rotvec) < np.pi
    assert np.all(np.linalg.eigvalsh(s.P) >= 0)


def test_constant_pose_converges():
    target = Pose6DoF(so3_exp([0.1, -0.2, 0.3]), [0.5, -0.2, 4.0])
    s = kf_init(target, q_pos=1e-12, q_rot=1e-12)
    for _ in range(50):
        s, out = kf_step(s, target)
    assert np.linalg.norm(out.t - target.t) <= 1e-6
    assert geodesic_angle(out.R, target.R) <= 1e-6


def test_tiny_measurement_noise_tracks_measurements(rng):
    s = kf_init(Pose6DoF(np.eye(3), np.zeros(3)), r_pos=1e-14, r_rot=1e-14)
    for _ in range(10):
        m = Pose6DoF(so3_exp(rng.normal(scale=0.3, size=3)), rng.normal(size=3))
        s, out = kf_step(s, m)
        assert np.allclose(out.t, m.t, atol=1e-6)
        assert geodesic_angle(out.R, m.R) <= 1e-6


def test_offset_start_approaches_constant_pose():
    target = Pose6DoF(so3_exp([0.1, -0.2, 0.3]), [0.5, -0.2, 4.0])
    s = kf_init(Pose6DoF(np.eye(3), [0.0, 0.0, 3.0]), q_pos=1e-12, q_rot=1e-12)
    errs = []
    for _ in range(200):
        s, out = kf_step(s, target)
        errs.append(np.linalg.norm(out.t - target.t))
    # the implied velocity overshoots first, then the line fit settles as 1/n
    assert errs[-1] < 0.1 * max(errs) and errs[-1] < errs[100] < errs[50]


def test_noisy_constant_velocity_track_is_smoothed():
    r = np.random.default_rng(0)
    k = np.arange(200)[:, None]
    truth = np.array([0.0, 0.0, 5.0]) + k * np.array([0.01, -0.005, 0.002])
    meas = truth + r.normal(scale=0.05, size=truth.shape)
    out = smooth_sequence([Pose6DoF(np.eye(3), m) for m in meas], r_pos=0.05**2)
    est = np.array([p.t for p in out])
    rmse = lambda a: np.sqrt(np.mean(np.sum((a - truth) ** 2, axis=1)))
    assert rmse(est) < rmse(meas)


def test_default_parameters_also_smooth():
    r = np.random.default_rng(1)
    truth = np.array([0.0, 0.0, 5.0]) + np.arange(200)[:, None] * np.array([0.01, 0.0, 0.0])
    meas = truth + r.normal(scale=0.05, size=truth.shape)
    est = np.array([p.t for p in smooth_sequence([Pose6DoF(np.eye(3), m) for m in meas])])
    assert np.mean(np.sum((est - truth) ** 2, axis=1)) < np.mean(np.sum((meas - truth) ** 2, axis=1))


def test_single_pose_passthrough(rng):
    p = Pose6DoF(random_rotation(rng), rng.normal(size=3))
    assert smooth_sequence([p]) == [p]


def test_identity_rotations_stay_identity(rng):
    out = smooth_sequence([Pose6DoF(np.eye(3), rng.normal(size=3)) for _ in range(30)])
    assert all(np.allclose(p.R, np.eye(3), atol=1e-15) for p in out)


def test_rotations_stay_on_manifold_and_covariance_psd(rng):
    R0 = random_rotation(rng)
    s = kf_init(Pose6DoF(R0, np.zeros(3)))
    for k in range(100):
        m = Pose6DoF(so3_exp(rng.normal(scale=0.2, size=3)) @ so3_exp([0, 0, 0.05 * k]) @ R0, rng.normal(size=3))
        s, out = kf_step(s, m)
        ortho, det = rotation_error(out.R)
        assert ortho <= 1e-9 and det <= 1e-9
        assert np.allclose(s.P, s.P.T, atol=0) and np.linalg.eigvalsh(s.P).min() >= -1e-12


def test_rotation_filter_can_be_disabled(rng):
    ms = [Pose6DoF(random_rotation(rng), rng.normal(size=3)) for _ in range(5)]
    out = smooth_sequence(ms, filter_rotation=False)
    assert all(np.array_equal(o.R, m.R) for o, m in zip(out, ms))


def test_empty_sequence_rejected():
    with pytest.raises(ValueError):
        smooth_sequence([])


def test_non_finite_measurement_rejected():
    s = kf_init(Pose6DoF.identity([0, 0, 1.0]))
    with pytest.raises(FloatingPointError):
        kf_step(s, Pose6DoF.identity([np.nan, 0, 1.0]))
