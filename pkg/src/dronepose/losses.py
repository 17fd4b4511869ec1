"""Keypoint regression losses: pose-adaptive Mahalanobis, Gaussian and MSE.

The pose-adaptive loss for one frame with GT keypoints ``y_k`` and predictions
``p_k`` is::

    Sigma   = cov(y_1..y_K)                       (population covariance, 2x2)
    Sigma_t = S(t) * Sigma + eps * I,  S(t) = D * exp(-0.01 * alpha * t)
    d_k     = sqrt((y_k - p_k)^T Sigma_t^-1 (y_k - p_k))
    L       = mean_k [1 - exp(-d_k / 2) / (2 pi sqrt(det Sigma_t))]

The exponent uses the plain (not squared) distance, so ``L`` is not a
normalized density and can go negative once ``det Sigma_t`` is small. The
Gaussian family replaces ``Sigma`` by the identity.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np

NUM_KEYPOINTS = 4


class LossFamily(str, Enum):
    MSE = "mse"
    GAUSSIAN = "gaussian"
    POSE_ADAPTIVE = "pose_adaptive"


class Decay(str, Enum):
    FIXED = "fixed"
    LINEAR = "linear"
    EXP = "exp"


@dataclass(frozen=True)
class LossConfig:
    family: LossFamily = LossFamily.POSE_ADAPTIVE
    decay: Decay = Decay.EXP
    alpha: float = 5.0
    D: float = 10.0
    epsilon: float = 1e-6
    fixed_scale: float = 1.0
    linear_start: float | None = None
    linear_end: float | None = None
    linear_t_max: float = 100.0

    def __post_init__(self):
        object.__setattr__(self, "family", LossFamily(self.family))
        object.__setattr__(self, "decay", Decay(self.decay))
        if not self.D > 0:
            raise ValueError("D must be > 0")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")

    def to_dict(self):
        d = asdict(self)
        d["family"] = self.family.value
        d["decay"] = self.decay.value
        return d


def scale_schedule(t, cfg):
    """Covariance scale S(t) for (0-based) epoch ``t``."""
    if t < 0:
        raise ValueError("epoch must be >= 0")
    if cfg.decay is Decay.EXP:
        return cfg.D * math.exp(-0.01 * cfg.alpha * t)
    if cfg.decay is Decay.FIXED:
        return cfg.fixed_scale
    # linear: shares its endpoints with the exponential schedule unless overridden
    start = cfg.D if cfg.linear_start is None else cfg.linear_start
    end = cfg.D * math.exp(-0.01 * cfg.alpha * cfg.linear_t_max) if cfg.linear_end is None else cfg.linear_end
    frac = min(max(t / cfg.linear_t_max, 0.0), 1.0) if cfg.linear_t_max > 0 else 1.0
    return start + (end - start) * frac


def keypoint_covariance(gt):
    """Mean and population covariance (divide by K) of the GT keypoints.

    Accepts one frame ``(K, 2)`` or a batch ``(B, K, 2)``.
    """
    gt = np.asarray(gt, dtype=float)
    mu = gt.mean(axis=-2)
    c = gt - mu[..., None, :]
    sigma = np.einsum("...ki,...kj->...ij", c, c) / gt.shape[-2]
    return mu, sigma


def scaled_covariance(sigma, t, cfg):
    """``S(t) * sigma + eps * I`` with its closed-form 2x2 inverse and determinant."""
    sigma = np.asarray(sigma, dtype=float)
    st = scale_schedule(t, cfg) * sigma + cfg.epsilon * np.eye(2)
    a, b, c, d = st[..., 0, 0], st[..., 0, 1], st[..., 1, 0], st[..., 1, 1]
    det = a * d - b * c
    inv = np.empty_like(st)
    inv[..., 0, 0] = d / det
    inv[..., 0, 1] = -b / det
    inv[..., 1, 0] = -c / det
    inv[..., 1, 1] = a / det
    return st, inv, det


def mahalanobis_t(gt_k, pred_k, sigma_t_inv):
    e = np.asarray(gt_k, dtype=float) - np.asarray(pred_k, dtype=float)
    q = np.einsum("...i,...ij,...j->...", e, sigma_t_inv, e)
    return np.sqrt(np.maximum(q, 0.0))


def _gaussian_terms(gt, pred, t, cfg, identity):
    gt = np.asarray(gt, dtype=float)
    if identity:
        sigma = np.broadcast_to(np.eye(2), gt.shape[:-2] + (2, 2))
    else:
        sigma = keypoint_covariance(gt)[1]
    _, inv, det = scaled_covariance(sigma, t, cfg)
    e = gt - np.asarray(pred, dtype=float)  # (..., K, 2)
    w = np.einsum("...ij,...kj->...ki", inv, e)  # Sigma_t^-1 e
    d = np.sqrt(np.maximum(np.einsum("...ki,...ki->...k", e, w), 0.0))
    norm = 1.0 / (2.0 * math.pi * np.sqrt(det))
    return e, w, d, norm


def frame_losses(gt, pred, t, cfg):
    """Per-frame loss values and gradients w.r.t. ``pred``.

    ``gt`` and ``pred`` have shape ``(..., K, 2)``; returns ``(loss[...],
    grad[..., K, 2])``. At zero distance the gradient is defined as 0.
    """
    gt = np.asarray(gt, dtype=float)
    pred = np.asarray(pred, dtype=float)
    if not (np.all(np.isfinite(gt)) and np.all(np.isfinite(pred))):
        raise FloatingPointError("non-finite keypoints passed to loss")
    K = gt.shape[-2]
    if cfg.family is LossFamily.MSE:
        diff = pred - gt
        n = diff.shape[-1] * K
        return np.sum(diff**2, axis=(-1, -2)) / n, 2.0 * diff / n
    e, w, d, norm = _gaussian_terms(gt, pred, t, cfg, identity=cfg.family is LossFamily.GAUSSIAN)
    g = norm[..., None] * np.exp(-0.5 * d)  # (..., K)
    loss = np.mean(1.0 - g, axis=-1)
    # dL/dpred_k = -(1/K) * g_k * (1/2) * dd_k/dpred_k,  dd/dpred = -Sigma_t^-1 e / d
    with np.errstate(divide="ignore", invalid="ignore"):
        coef = np.where(d > 0, -0.5 * g / (K * d), 0.0)
    grad = coef[..., None] * w
    return loss, grad


def pose_adaptive_loss(gt, pred, t, cfg):
    """Loss and gradient for one frame (``(4, 2)`` arrays)."""
    loss, grad = frame_losses(gt, pred, t, cfg)
    return float(loss), grad


def batch_loss(gt, pred, t, cfg):
    """Mean loss over a batch ``(B, K, 2)`` and its gradient w.r.t. ``pred``."""
    loss, grad = frame_losses(gt, pred, t, cfg)
    B = loss.shape[0]
    return float(loss.mean()), grad / B
