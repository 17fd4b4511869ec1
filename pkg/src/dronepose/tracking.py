"""Constant-velocity Kalman filter over position and orientation.

State ``x = [p(3), v(3), r(3), w(3)]``: position (m), velocity (m/frame),
orientation as a rotation vector (rad) and angular velocity (rad/frame). The
orientation itself is carried as a rotation matrix; the ``r`` block of the
covariance is an error state in the tangent space at that rotation, so the
predict step is ``R <- exp(w) R`` and the innovation is ``log(R_meas R_pred^T)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datamodel import Pose6DoF
from .geometry import nearest_rotation, so3_exp, so3_log

Q_POS = 1e-4
Q_ROT = 1e-4
R_POS = 1e-2
R_ROT = 1e-2
VELOCITY_VAR = 10.0

_F = np.eye(12)
_F[0:3, 3:6] = np.eye(3)
_F[6:9, 9:12] = np.eye(3)
_H = np.zeros((6, 12))
_H[0:3, 0:3] = np.eye(3)
_H[3:6, 6:9] = np.eye(3)


def _cv_block(q):
    # discrete white-noise acceleration, dt = 1 frame
    return q * np.kron(np.array([[0.25, 0.5], [0.5, 1.0]]), np.eye(3))


@dataclass
class KalmanState:
    x: np.ndarray
    R: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    Rm: np.ndarray
    filter_rotation: bool = True
    initialized: bool = True

    @property
    def position(self):
        return self.x[0:3]

    @property
    def rotvec(self):
        return self.x[6:9]

    def pose(self):
        return Pose6DoF(self.R, self.x[0:3])


def _psd(P):
    P = 0.5 * (P + P.T)
    w, V = np.linalg.eigh(P)
    if w.min() < 0:
        P = (V * np.maximum(w, 0.0)) @ V.T
        P = 0.5 * (P + P.T)
    return P


def kf_init(first, q_pos=Q_POS, q_rot=Q_ROT, r_pos=R_POS, r_rot=R_ROT, filter_rotation=True):
    """State at the first measurement, zero velocities, wide velocity covariance."""
    x = np.zeros(12)
    x[0:3] = first.t
    x[6:9] = so3_log(first.R)
    P = np.diag([r_pos] * 3 + [VELOCITY_VAR] * 3 + [r_rot] * 3 + [VELOCITY_VAR] * 3)
    Q = np.zeros((12, 12))
    Q[np.ix_([0, 1, 2, 3, 4, 5], [0, 1, 2, 3, 4, 5])] = _cv_block(q_pos)
    Q[np.ix_([6, 7, 8, 9, 10, 11], [6, 7, 8, 9, 10, 11])] = _cv_block(q_rot)
    Rm = np.diag([r_pos] * 3 + [r_rot] * 3)
    return KalmanState(x, np.array(first.R, dtype=float), P, Q, Rm, filter_rotation)


def kf_step(state, measurement):
    """Predict one frame ahead, update with ``measurement``; returns ``(state, filtered pose)``."""
    if not state.initialized:
        raise RuntimeError("Kalman state not initialized")
    if not (np.all(np.isfinite(measurement.R)) and np.all(np.isfinite(measurement.t))):
        raise FloatingPointError("non-finite measurement")
    x = _F @ state.x
    R_pred = so3_exp(state.x[9:12]) @ state.R
    P = _F @ state.P @ _F.T + state.Q

    y = np.concatenate([measurement.t - x[0:3], so3_log(measurement.R @ R_pred.T)])
    S = _H @ P @ _H.T + state.Rm
    K = np.linalg.solve(S, _H @ P).T  # P H^T S^-1, S symmetric
    dx = K @ y
    IKH = np.eye(12) - K @ _H
    P = _psd(IKH @ P @ IKH.T + K @ state.Rm @ K.T)

    x[0:6] += dx[0:6]
    x[9:12] += dx[9:12]
    R_new = nearest_rotation(so3_exp(dx[6:9]) @ R_pred)
    x[6:9] = so3_log(R_new)
    new = KalmanState(x, R_new, P, state.Q, state.Rm, state.filter_rotation)
    R_out = R_new if state.filter_rotation else np.array(measurement.R)
    return new, Pose6DoF(R_out, x[0:3].copy())


def smooth_sequence(estimates, q_pos=Q_POS, q_rot=Q_ROT, r_pos=R_POS, r_rot=R_ROT, filter_rotation=True):
    """Run the filter over one sequence; output has the same length as the input."""
    if len(estimates) == 0:
        raise ValueError("empty pose sequence")
    state = kf_init(estimates[0], q_pos, q_rot, r_pos, r_rot, filter_rotation)
    out = [estimates[0]]
    for meas in estimates[1:]:
        state, pose = kf_step(state, meas)
        out.append(pose)
    return out
