"""Geometric 6DoF recovery from four propeller keypoints.

``solve_pnp`` initialises from the plane-induced homography (the model lies in
its z = 0 plane) and refines ``(R, t)`` with Levenberg-Marquardt on the pixel
reprojection error, updating ``R <- exp(w) R``. ``estimate_pose`` then rebuilds
the propellers in the camera frame and forms the body rotation from the
centroid-to-propeller directions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datamodel import ObjectModel3D, Pose6DoF
from .geometry import nearest_rotation, skew, so3_exp

LM_LAMBDA0 = 1e-3
LM_MAX_ITER = 100
STEP_TOL = 1e-10
COST_TOL = 1e-12
GRAD_TOL = 1e-8
DEGENERATE_TOL = 1e-9


class DegenerateConfigurationError(ValueError):
    pass


class CheiralityError(ValueError):
    pass


@dataclass(frozen=True)
class PnPSolution:
    pose: Pose6DoF
    reprojection_rmse: float
    iterations: int
    converged: bool
    gradient_norm: float = 0.0


def _model_points(model):
    return np.asarray(model.points if isinstance(model, ObjectModel3D) else model, dtype=float)


def _normalize(pts):
    """Hartley similarity taking ``pts`` to zero mean and mean distance sqrt(2)."""
    c = pts.mean(axis=0)
    s = np.sqrt(2.0) / np.mean(np.linalg.norm(pts - c, axis=1))
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def homography_dlt(src, dst):
    """Normalized DLT homography with ``dst ~ H src`` (both ``(n, 2)``, n >= 4)."""
    Ts, Td = _normalize(src), _normalize(dst)
    s = (np.c_[src, np.ones(len(src))] @ Ts.T)[:, :2]
    d = (np.c_[dst, np.ones(len(dst))] @ Td.T)[:, :2]
    rows = []
    for (x, y), (u, v) in zip(s, d):
        rows.append([-x, -y, -1, 0, 0, 0, u * x, u * y, u])
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
    _, _, Vt = np.linalg.svd(np.asarray(rows))
    Hn = Vt[-1].reshape(3, 3)
    H = np.linalg.inv(Td) @ Hn @ Ts
    return H / np.linalg.norm(H)


def _plane_frame(pts):
    """Rigid transform taking the model into its own z = 0 plane (identity for the default model)."""
    c = pts.mean(axis=0)
    _, _, Vt = np.linalg.svd(pts - c)
    B = Vt.copy()
    if np.linalg.det(B) < 0:
        B[2] *= -1
    return B, c  # plane coords = B @ (X - c)


def homography_candidates(kp, model, intr):
    """Both sign choices of the plane-homography decomposition, as ``Pose6DoF``."""
    pts = _model_points(model)
    B, c = _plane_frame(pts)
    plane = (pts - c) @ B.T
    Ainv = np.linalg.inv(intr.matrix)
    norm_img = (np.c_[kp, np.ones(len(kp))] @ Ainv.T)[:, :2]
    H = homography_dlt(plane[:, :2], norm_img)
    out = []
    for sign in (1.0, -1.0):
        h1, h2, h3 = (sign * H).T
        lam = 2.0 / (np.linalg.norm(h1) + np.linalg.norm(h2))
        r1, r2 = lam * h1, lam * h2
        Rp = nearest_rotation(np.c_[r1, r2, np.cross(r1, r2)])
        tp = lam * h3
        # back to the original model frame: X_c = Rp B (X - c) + tp
        R = Rp @ B
        out.append(Pose6DoF(R, tp - R @ c))
    return out


def _residuals(R, t, pts, kp, intr):
    pc = pts @ R.T + t
    u = intr.fx * pc[:, 0] / pc[:, 2] + intr.cx
    v = intr.fy * pc[:, 1] / pc[:, 2] + intr.cy
    return np.stack([u, v], axis=1) - kp, pc


def _jacobian(R, pc, pts, intr):
    """d residual / d (w, t) with R <- exp(w) R, stacked per point (2n x 6)."""
    J = np.zeros((2 * len(pts), 6))
    for i, (X, Y, Z) in enumerate(pc):
        duv = np.array([[intr.fx / Z, 0.0, -intr.fx * X / Z**2], [0.0, intr.fy / Z, -intr.fy * Y / Z**2]])
        rp = R @ pts[i]
        J[2 * i : 2 * i + 2, :3] = duv @ (-skew(rp))
        J[2 * i : 2 * i + 2, 3:] = duv
    return J


def refine_pose(pose, kp, model, intr, max_iter=LM_MAX_ITER):
    """Levenberg-Marquardt refinement of ``pose`` on the summed squared pixel error.

    Stops when an accepted step is shorter than ``STEP_TOL``, the cost drops by
    less than ``COST_TOL``, or the gradient norm falls below ``GRAD_TOL``.
    ``converged`` is reported only when the final gradient norm is within
    ``GRAD_TOL``.
    """
    pts = _model_points(model)
    kp = np.asarray(kp, dtype=float)
    R, t = pose.R.copy(), pose.t.copy()
    r, pc = _residuals(R, t, pts, kp, intr)
    cost = float(np.sum(r**2))
    lam = LM_LAMBDA0
    it = 0
    grad_norm = np.inf
    while it < max_iter:
        it += 1
        J = _jacobian(R, pc, pts, intr)
        g = J.T @ r.ravel()
        grad_norm = float(np.linalg.norm(g))
        if grad_norm <= GRAD_TOL:
            break
        JtJ = J.T @ J
        accepted = False
        while lam < 1e16:
            delta = np.linalg.solve(JtJ + lam * np.eye(6), -g)
            R_new = so3_exp(delta[:3]) @ R
            t_new = t + delta[3:]
            r_new, pc_new = _residuals(R_new, t_new, pts, kp, intr)
            new_cost = float(np.sum(r_new**2)) if np.all(pc_new[:, 2] > 0) else np.inf
            if new_cost <= cost:
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            break
        R, t, r, pc = R_new, t_new, r_new, pc_new
        lam = max(lam / 10.0, 1e-12)
        drop = cost - new_cost
        cost = new_cost
        if np.linalg.norm(delta) < STEP_TOL or drop < COST_TOL:
            g = _jacobian(R, pc, pts, intr).T @ r.ravel()
            grad_norm = float(np.linalg.norm(g))
            break
    R = nearest_rotation(R)
    rmse = float(np.sqrt(np.mean(np.sum(r**2, axis=1))))
    return PnPSolution(Pose6DoF(R, t), rmse, it, bool(grad_norm <= GRAD_TOL), grad_norm)


def _check_degenerate(kp):
    c = kp - kp.mean(axis=0)
    s = np.linalg.svd(c, compute_uv=False)
    if s[0] < DEGENERATE_TOL or s[-1] < DEGENERATE_TOL * s[0]:
        raise DegenerateConfigurationError("image keypoints are coincident or collinear")


def solve_pnp(kp, model, intr):
    """Pose minimising sum_k |y_k - proj(R Y_k + t)|^2 for four coplanar correspondences.

    Both signs of the homography decomposition are scored; the cheirality-valid
    one with the lower residual is refined.
    """
    kp = np.asarray(kp, dtype=float)
    if kp.shape != (4, 2) or not np.all(np.isfinite(kp)):
        raise ValueError(f"expected 4 finite keypoints, got shape {kp.shape}")
    _check_degenerate(kp)
    pts = _model_points(model)
    best = None
    for cand in homography_candidates(kp, pts, intr):
        r, pc = _residuals(cand.R, cand.t, pts, kp, intr)
        if np.any(pc[:, 2] <= 0):
            continue
        cost = float(np.sum(r**2))
        if best is None or cost < best[0]:
            best = (cost, cand)
    if best is None:
        raise CheiralityError("no homography candidate places the model in front of the camera")
    return refine_pose(best[1], kp, pts, intr)


def camera_frame_keypoints(model, pose):
    """Propeller positions in camera coordinates, ``R Y + t``."""
    pc = _model_points(model) @ pose.R.T + pose.t
    if np.any(pc[:, 2] <= 0):
        raise CheiralityError("reconstructed keypoint has non-positive depth")
    return pc


def rotation_from_keypoints(camera_pts):
    """Body rotation and centroid from four camera-frame propellers.

    ``v1 = Y_2 - Y_O``, ``v2 = Y_3 - Y_O``, ``v3 = v1 x v2`` (1-based indices);
    the unit columns ``[v1 v2 v3]`` are projected to the nearest rotation, which
    leaves them unchanged when ``v1`` and ``v2`` are already perpendicular.
    """
    Y = np.asarray(camera_pts, dtype=float)
    centroid = Y.mean(axis=0)
    v1 = Y[1] - centroid
    v2 = Y[2] - centroid
    v3 = np.cross(v1, v2)
    n1, n2, n3 = (np.linalg.norm(v) for v in (v1, v2, v3))
    if min(n1, n2, n3) < DEGENERATE_TOL:
        raise DegenerateConfigurationError("keypoint directions are too short or parallel")
    M = np.c_[v1 / n1, v2 / n2, v3 / n3]
    return nearest_rotation(M), centroid


def estimate_pose(kp, model, intr, return_solution=False):
    """PnP -> camera-frame propellers -> (R_pose, t_pose) before any filtering."""
    sol = solve_pnp(kp, model, intr)
    R, t = rotation_from_keypoints(camera_frame_keypoints(model, sol.pose))
    pose = Pose6DoF(R, t)
    return (pose, sol) if return_solution else pose
