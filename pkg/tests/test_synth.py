import numpy as np
import pytest

from dronepose.datamodel import CameraIntrinsics, ObjectModel3D, Pose6DoF
from dronepose.geometry import geodesic_angle
from dronepose.synth import (
    BehindCameraError,
    InfeasibleConfigError,
    TrajectoryConfig,
    add_noise,
    generate_dataset,
    project_keypoints,
    render_frame,
    sample_trajectory,
)

INTR = CameraIntrinsics.default()


def poses(**kw):
    return sample_trajectory(TrajectoryConfig(**kw))


def test_static_flags_give_identical_poses():
    ps = poses(n_frames=20, translation=False, rotation=False, seed=3)
    assert all(p == ps[0] for p in ps)


def test_linear_translation_is_affine():
    ts = np.array([p.t for p in poses(n_frames=100, translation=True, nonlinear=False, seed=5)])
    second = np.diff(ts, n=2, axis=0)
    assert np.max(np.abs(second)) < 1e-12


def test_nonlinear_translation_is_curved():
    ts = np.array([p.t for p in poses(n_frames=100, translation=True, nonlinear=True, seed=5)])
    assert np.max(np.abs(np.diff(ts, n=2, axis=0))) > 1e-6


def test_rotation_step_bounded_by_rate():
    ps = poses(n_frames=200, rotation=True, angular_rate_max=2.0, seed=6)
    steps = [np.degrees(geodesic_angle(a.R, b.R)) for a, b in zip(ps, ps[1:])]
    assert max(steps) <= 2.0 + 1e-9
    assert max(steps) > 0.5


def test_rotation_off_keeps_rotation_fixed():
    ps = poses(n_frames=50, rotation=False, nonlinear=True, seed=8)
    assert max(geodesic_angle(ps[0].R, p.R) for p in ps) == 0.0


def test_translation_off_keeps_position_fixed():
    ps = poses(n_frames=50, translation=False, rotation=True, seed=8)
    assert max(np.linalg.norm(p.t - ps[0].t) for p in ps) == 0.0


def test_projection_on_optical_axis():
    kp = project_keypoints(np.zeros((4, 3)), Pose6DoF.identity([0, 0, 5.0]), INTR)
    assert np.allclose(kp, [INTR.cx, INTR.cy])


def test_projection_by_hand():
    intr = CameraIntrinsics(1000.0, 1000.0, 320.0, 240.0, 640, 480)
    pts = np.array([[0.106, 0.106, 0.0]] * 4)
    kp = project_keypoints(pts, Pose6DoF.identity([0, 0, 5.0]), intr)
    assert np.allclose(kp[0], [320.0 + 21.2, 240.0 + 21.2], atol=1e-12)


def test_projection_behind_camera():
    with pytest.raises(BehindCameraError):
        project_keypoints(ObjectModel3D.square(), Pose6DoF.identity([0, 0, -1.0]), INTR)


def test_render_stays_near_disks():
    kp = np.array([[30.0, 30.0], [30.0, 34.0], [34.0, 34.0], [34.0, 30.0]])
    img = render_frame(kp, CameraIntrinsics(80, 80, 32, 32, 64, 64)).pixels
    rows, cols = np.nonzero(img)
    r = 1.5 + 0.5 + 1.0
    assert cols.min() >= 30 - r and cols.max() <= 34 + r
    assert rows.min() >= 30 - r and rows.max() <= 34 + r


def test_render_deterministic():
    kp = np.array([[10.0, 12.0], [40.0, 15.0], [45.0, 50.0], [12.0, 44.0]])
    intr = CameraIntrinsics(80, 80, 32, 32, 64, 64)
    assert np.array_equal(render_frame(kp, intr).pixels, render_frame(kp, intr).pixels)


def test_render_offscreen_is_blank_and_clipped():
    kp = np.full((4, 2), -50.0) + np.arange(8).reshape(4, 2)
    out = render_frame(kp, CameraIntrinsics(80, 80, 32, 32, 64, 64))
    assert out.clipped and not np.any(out.pixels)


def test_render_distinguishes_propellers():
    kp = np.array([[10.0, 10.0], [50.0, 10.0], [50.0, 50.0], [10.0, 50.0]])
    img = render_frame(kp, CameraIntrinsics(80, 80, 32, 32, 64, 64)).pixels
    vals = [img[int(y), int(x)] for x, y in kp]
    assert np.allclose(vals, [0.4, 0.6, 0.8, 1.0])


def test_render_patch_must_divide():
    with pytest.raises(ValueError):
        render_frame(np.zeros((4, 2)), CameraIntrinsics(80, 80, 32, 32, 64, 64), patch=7)


def test_zero_noise_is_identity(rng):
    kp = rng.uniform(0, 100, size=(4, 2))
    assert np.array_equal(add_noise(kp, 0.0, rng), kp)


def test_noise_std_monte_carlo():
    r = np.random.default_rng(0)
    samples = np.array([add_noise(np.zeros((4, 2)), 2.0, r)[0, 0] for _ in range(100_000)])
    assert abs(samples.std() - 2.0) < 0.02 * 2.0


def test_noise_seeded():
    kp = np.ones((4, 2))
    a = add_noise(kp, 1.0, np.random.default_rng(1))
    b = add_noise(kp, 1.0, np.random.default_rng(1))
    assert np.array_equal(a, b)


def test_linear_sequence_has_constant_rotation():
    ds = generate_dataset(TrajectoryConfig(n_frames=500, translation=True, rotation=False, seed=11))
    assert len(ds) == 500
    assert all(np.array_equal(r.pose.R, ds.records[0].pose.R) for r in ds.records)


def test_rotating_curved_sequence():
    ds = generate_dataset(TrajectoryConfig(n_frames=300, translation=True, rotation=True, nonlinear=True, seed=13))
    assert len(ds) == 300
    Rs = [r.pose.R for r in ds.records]
    assert max(geodesic_angle(Rs[0], R) for R in Rs) > 0.1
    ts = np.array([r.pose.t for r in ds.records])
    assert np.max(np.abs(np.diff(ts, n=2, axis=0))) > 1e-6


def test_noiseless_observations_equal_gt():
    ds = generate_dataset(TrajectoryConfig(n_frames=20, sigma_px=0.0, seed=2))
    assert all(np.array_equal(r.kp2d_obs, r.kp2d_gt) for r in ds.records)


def test_generated_records_reproject():
    ds = generate_dataset(TrajectoryConfig(n_frames=50, rotation=True, nonlinear=True, seed=21))
    for r in ds.records:
        assert np.max(np.abs(project_keypoints(r.model, r.pose, r.intrinsics) - r.kp2d_gt)) <= 1e-9


def test_same_seed_same_dataset():
    cfg = TrajectoryConfig(n_frames=30, rotation=True, nonlinear=True, sigma_px=1.0, seed=17)
    assert generate_dataset(cfg) == generate_dataset(cfg)


def test_keypoints_inside_image_and_depth_range():
    cfg = TrajectoryConfig(n_frames=100, rotation=True, nonlinear=True, seed=4)
    for r in generate_dataset(cfg).records:
        z = r.pose.transform(r.model.points)[:, 2]
        assert np.all((z >= 3.0) & (z <= 8.0))
        assert np.all((r.kp2d_gt >= 0) & (r.kp2d_gt <= 639))


def test_clockwise_order_in_body_frame():
    # looking down -z the order (+x+y), (+x-y), (-x-y), (-x+y) turns clockwise: negative signed area
    p = ObjectModel3D.square().points[:, :2]
    area = 0.5 * np.sum(p[:, 0] * np.roll(p[:, 1], -1) - np.roll(p[:, 0], -1) * p[:, 1])
    assert area < 0


def test_infeasible_config():
    tiny = CameraIntrinsics(10, 10, 4, 4, 8, 8)
    with pytest.raises(InfeasibleConfigError):
        sample_trajectory(TrajectoryConfig(n_frames=5, depth_range=(0.1, 0.2)), intr=tiny)
