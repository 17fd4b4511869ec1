"""Synthetic drone sequences: 6DoF trajectories, pinhole projection, toy rendering, noise."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datamodel import (
    CameraIntrinsics,
    DatasetMeta,
    FrameRecord,
    ObjectModel3D,
    Pose6DoF,
    SequenceDataset,
)
from .geometry import so3_exp

MIN_DEPTH = 1e-9
DISK_LEVELS = (0.4, 0.6, 0.8, 1.0)
ARM_LEVEL = 0.2


class InfeasibleConfigError(ValueError):
    pass


class BehindCameraError(ValueError):
    pass


@dataclass(frozen=True)
class TrajectoryConfig:
    n_frames: int = 100
    translation: bool = True
    rotation: bool = False
    nonlinear: bool = False
    depth_range: tuple = (3.0, 8.0)
    angular_rate_max: float = 1.0  # degrees per frame
    seed: int = 0
    sigma_px: float = 0.0
    max_tilt_deg: float = 50.0
    margin_frac: float = 0.05

    def check(self):
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        lo, hi = self.depth_range
        if not 0 < lo < hi:
            raise ValueError("depth_range must satisfy 0 < min < max")
        if self.sigma_px < 0:
            raise ValueError("sigma_px must be >= 0")
        if self.angular_rate_max < 0:
            raise ValueError("angular_rate_max must be >= 0")


@dataclass(frozen=True)
class RasterImage:
    pixels: np.ndarray
    clipped: bool = False

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


def camera_points(model_points, pose):
    return np.asarray(model_points, dtype=float) @ pose.R.T + pose.t


def pinhole(pc, intr):
    pc = np.asarray(pc, dtype=float)
    u = intr.fx * pc[:, 0] / pc[:, 2] + intr.cx
    v = intr.fy * pc[:, 1] / pc[:, 2] + intr.cy
    return np.stack([u, v], axis=1)


def project_keypoints(model, pose, intr):
    """Project the four body-frame propellers to pixel coordinates, order preserved."""
    pts = model.points if isinstance(model, ObjectModel3D) else model
    pc = camera_points(pts, pose)
    if np.any(pc[:, 2] <= MIN_DEPTH):
        raise BehindCameraError(f"point at or behind camera plane (min Z_c = {pc[:, 2].min():.3g} m)")
    return pinhole(pc, intr)


def add_noise(kp, sigma_px, rng):
    if sigma_px < 0:
        raise ValueError("sigma_px must be >= 0")
    kp = np.asarray(kp, dtype=float)
    if sigma_px == 0:
        return kp.copy()
    return kp + rng.normal(0.0, sigma_px, size=kp.shape)


def _inside(model_points, pose, intr, cfg):
    pc = camera_points(model_points, pose)
    lo, hi = cfg.depth_range
    if np.any(pc[:, 2] < lo) or np.any(pc[:, 2] > hi):
        return False
    uv = pinhole(pc, intr)
    m = cfg.margin_frac * min(intr.width, intr.height)
    return bool(
        np.all(uv[:, 0] >= m) and np.all(uv[:, 0] <= intr.width - 1 - m)
        and np.all(uv[:, 1] >= m) and np.all(uv[:, 1] <= intr.height - 1 - m)
    )


def _base_rotation(rng, max_tilt_deg):
    # body z axis pointing back at the camera (-z_cam), tilted and spun at random
    flip = np.diag([1.0, -1.0, -1.0])
    yaw = rng.uniform(-np.pi, np.pi)
    tilt = np.deg2rad(rng.uniform(0.0, max_tilt_deg))
    axis_angle = rng.uniform(-np.pi, np.pi)
    tilt_axis = np.array([np.cos(axis_angle), np.sin(axis_angle), 0.0])
    return so3_exp(tilt * tilt_axis) @ flip @ so3_exp([0.0, 0.0, yaw])


def _random_translation(rng, R, model_points, intr, cfg, tries=200):
    lo, hi = cfg.depth_range
    for _ in range(tries):
        z = rng.uniform(lo, hi)
        u = rng.uniform(0.2, 0.8) * intr.width
        v = rng.uniform(0.2, 0.8) * intr.height
        t = np.array([(u - intr.cx) * z / intr.fx, (v - intr.cy) * z / intr.fy, z])
        if _inside(model_points, Pose6DoF(R, t), intr, cfg):
            return t
    return None


def _rotation_track(rng, R0, n, rate_rad):
    """R(k) = exp(theta(k) a) R0 Rz(psi(k)) with |dpsi| + |dtheta| <= rate per frame."""
    if n == 1 or rate_rad == 0:
        return [R0] * n
    spin = 0.6 * rate_rad * rng.choice([-1.0, 1.0])
    period = rng.uniform(0.5, 1.0) * n
    amp = min(np.deg2rad(15.0), 0.4 * rate_rad * period / (2 * np.pi))
    phase = rng.uniform(0, 2 * np.pi)
    a = rng.normal(size=3)
    a[2] = 0.0
    a /= np.linalg.norm(a) or 1.0
    out = []
    for k in range(n):
        theta = amp * (np.sin(2 * np.pi * k / period + phase) - np.sin(phase))
        out.append(so3_exp(theta * a) @ R0 @ so3_exp([0.0, 0.0, spin * k]))
    return out


def _translation_track(rng, t0, t1, n, nonlinear, scale):
    k = np.arange(n, dtype=float)
    if n == 1:
        return t0[None, :].copy()
    if not nonlinear:
        return t0 + np.outer(k / (n - 1), (t1 - t0) * scale)
    # two sinusoids per axis around the start point
    span = np.abs(t1 - t0) + 0.05 * t0[2]
    track = np.repeat(t0[None, :], n, axis=0)
    for j in range(2):
        freq = rng.uniform(0.5, 1.5) * (j + 1)
        phase = rng.uniform(0, 2 * np.pi, size=3)
        amp = 0.5 * span * rng.uniform(0.5, 1.0, size=3) * scale
        track += amp * (np.sin(2 * np.pi * freq * k[:, None] / n + phase) - np.sin(phase))
    return track


def sample_trajectory(cfg, model=None, intr=None, rng=None):
    """Sample ``cfg.n_frames`` poses following the motion flags.

    Translation is either a constant-velocity line or a sum of two sinusoids
    per axis; rotation is a bounded yaw spin plus a tilt oscillation. Every pose
    keeps all model points within the depth range and inside the image.
    """
    cfg.check()
    model = model or ObjectModel3D.square()
    intr = intr or CameraIntrinsics.default()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    pts = model.points
    rate = np.deg2rad(cfg.angular_rate_max)
    n = cfg.n_frames
    for _ in range(100):
        R0 = _base_rotation(rng, cfg.max_tilt_deg)
        Rs = _rotation_track(rng, R0, n, rate) if cfg.rotation else [R0] * n
        t0 = _random_translation(rng, R0, pts, intr, cfg)
        if t0 is None:
            continue
        t1 = _random_translation(rng, R0, pts, intr, cfg) if cfg.translation else t0
        if t1 is None:
            continue
        scale = 1.0
        for _shrink in range(8):
            ts = (
                _translation_track(rng, t0, t1, n, cfg.nonlinear, scale)
                if cfg.translation
                else np.repeat(t0[None, :], n, axis=0)
            )
            poses = [Pose6DoF(R, t) for R, t in zip(Rs, ts)]
            if all(_inside(pts, p, intr, cfg) for p in poses):
                return poses
            scale *= 0.5
    raise InfeasibleConfigError(
        f"could not keep the model inside the image at depths {cfg.depth_range} "
        f"for intrinsics {intr.width}x{intr.height}"
    )


def render_frame(kp, intr, patch=8):
    """Rasterize the keypoints as anti-aliased disks joined by cross arms.

    Disk radius is 15% of the mean distance between adjacent propellers (at
    least 1.5 px); disk ``k`` is drawn with intensity ``DISK_LEVELS[k]``, arms
    (0-2 and 1-3) with ``ARM_LEVEL``. Pixel (row, col) is centred at (x=col, y=row).
    """
    W, H = int(intr.width), int(intr.height)
    if W % patch or H % patch:
        raise ValueError(f"patch size {patch} does not divide image size {W}x{H}")
    kp = np.asarray(kp, dtype=float)
    clipped = bool(np.any(kp[:, 0] < 0) or np.any(kp[:, 0] > W - 1) or np.any(kp[:, 1] < 0) or np.any(kp[:, 1] > H - 1))
    img = np.zeros((H, W))
    ys, xs = np.mgrid[0:H, 0:W].astype(float)
    side = np.linalg.norm(kp - np.roll(kp, -1, axis=0), axis=1).mean()
    radius = max(1.5, 0.15 * side)
    for a, b in ((0, 2), (1, 3)):
        p, q = kp[a], kp[b]
        d = q - p
        L2 = float(d @ d)
        s = np.zeros_like(xs) if L2 == 0 else np.clip(((xs - p[0]) * d[0] + (ys - p[1]) * d[1]) / L2, 0.0, 1.0)
        dist = np.hypot(xs - (p[0] + s * d[0]), ys - (p[1] + s * d[1]))
        cover = np.clip(1.0 - dist, 0.0, 1.0)
        img = np.maximum(img, ARM_LEVEL * cover)
    for k, (x, y) in enumerate(kp):
        cover = np.clip(radius + 0.5 - np.hypot(xs - x, ys - y), 0.0, 1.0)
        img = np.where(cover > 0, np.maximum(img * (1 - cover), DISK_LEVELS[k] * cover), img)
    return RasterImage(np.clip(img, 0.0, 1.0), clipped)


def generate_dataset(cfg, model=None, intr=None, sequence_id="seq", start_frame=0):
    """Trajectory -> clean projections (``kp2d_gt``) -> noisy observations (``kp2d_obs``)."""
    cfg.check()
    model = model or ObjectModel3D.square()
    intr = intr or CameraIntrinsics.default()
    traj_seed, noise_seed = np.random.SeedSequence(cfg.seed).spawn(2)
    poses = sample_trajectory(cfg, model, intr, np.random.default_rng(traj_seed))
    noise_rng = np.random.default_rng(noise_seed)
    records = []
    for i, pose in enumerate(poses):
        gt = project_keypoints(model, pose, intr)
        obs = add_noise(gt, cfg.sigma_px, noise_rng)
        records.append(FrameRecord(start_frame + i, sequence_id, intr, model, gt, obs, pose))
    meta = DatasetMeta(
        seed=cfg.seed, sigma_px=cfg.sigma_px, translation=cfg.translation,
        rotation=cfg.rotation, nonlinear=cfg.nonlinear,
    )
    return SequenceDataset(records=records, meta=meta)
