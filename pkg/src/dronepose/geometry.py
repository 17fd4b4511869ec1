"""Small SO(3) helpers shared by the synthetic generator, PnP and tracking code."""

import numpy as np
from scipy.spatial.transform import Rotation


def skew(v):
    """Cross-product matrix, ``skew(a) @ b == np.cross(a, b)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(rotvec):
    return Rotation.from_rotvec(np.asarray(rotvec, dtype=float)).as_matrix()


def so3_log(R):
    """Rotation vector of ``R`` on the principal branch (angle in [0, pi])."""
    return Rotation.from_matrix(np.asarray(R, dtype=float)).as_rotvec()


def geodesic_angle(R_a, R_b):
    """Angle in radians of the relative rotation ``R_a^T R_b``.

    Uses the chordal identity ``||R_a - R_b||_F = 2 sqrt(2) sin(theta / 2)``,
    which equals ``arccos((tr(R_a^T R_b) - 1) / 2)`` on SO(3) but keeps full
    precision near 0 (the arccos form bottoms out around 1e-8 rad).
    """
    chord = np.linalg.norm(np.asarray(R_a, dtype=float) - np.asarray(R_b, dtype=float))
    return float(2.0 * np.arcsin(np.clip(chord / (2.0 * np.sqrt(2.0)), 0.0, 1.0)))


def nearest_rotation(M):
    """Orthogonal Procrustes projection of a 3x3 matrix onto SO(3)."""
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    return U @ D @ Vt


def rotation_error(R):
    """(orthonormality residual in Frobenius norm, |det R - 1|)."""
    R = np.asarray(R, dtype=float)
    return float(np.linalg.norm(R.T @ R - np.eye(3))), float(abs(np.linalg.det(R) - 1.0))


def random_rotation(rng):
    """Uniformly distributed rotation matrix."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    return Rotation.from_quat(q).as_matrix()
