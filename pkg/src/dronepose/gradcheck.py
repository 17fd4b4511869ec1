"""Central finite-difference checks for the loss and network gradients."""

from __future__ import annotations

import numpy as np

from . import keyhead
from .losses import Decay, LossConfig, LossFamily, frame_losses, keypoint_covariance, scaled_covariance

STEP = 1e-5
# A central difference of an O(1) loss at step 1e-5 carries ~1e-11 of roundoff,
# so components below ~1e-5 cannot be resolved to 1e-6 relative accuracy.
LOSS_FLOOR = 1e-5
NETWORK_FLOOR = 1e-3


def relative_error(analytic, numeric, floor):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``, maximised.

    ``floor`` keeps entries whose true value is zero (or below what a central
    difference can resolve) from reporting roundoff as a huge relative error.
    """
    a, n = np.asarray(analytic, dtype=float), np.asarray(numeric, dtype=float)
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / den)) if a.size else 0.0


def numeric_gradient(f, x, h=STEP):
    """Central differences of scalar ``f`` with respect to array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f()
        x[idx] = old - h
        down = f()
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def random_loss_case(rng):
    """One ``(gt, pred, t, cfg)`` draw.

    The prediction error is drawn in whitened coordinates with scaled distance
    in [0.5, 3], away from the cone tip at d = 0 where the loss has no
    derivative and central differences pick up O((h / (d sigma_t))^2)
    truncation error.
    """
    family = LossFamily(rng.choice([f.value for f in LossFamily]))
    decay = Decay(rng.choice([d.value for d in Decay]))
    cfg = LossConfig(
        family=family, decay=decay, alpha=float(rng.uniform(0.0, 5.0)), D=float(rng.uniform(0.5, 10.0)),
        fixed_scale=float(rng.uniform(0.5, 5.0)),
    )
    t = int(rng.integers(0, 101))
    half = rng.uniform(0.5, 3.0)
    square = half * np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, -1.0], [-1.0, 1.0]])
    gt = square + rng.normal(scale=0.2 * half, size=(4, 2)) + rng.uniform(-5, 5, size=2)
    sigma = keypoint_covariance(gt)[1] if family is LossFamily.POSE_ADAPTIVE else np.eye(2)
    chol = np.linalg.cholesky(scaled_covariance(sigma, t, cfg)[0])
    u = rng.normal(size=(4, 2))
    u *= rng.uniform(0.5, 3.0, size=(4, 1)) / np.linalg.norm(u, axis=1, keepdims=True)
    pred = gt - u @ chol.T
    return gt, pred, t, cfg


def check_loss_gradients(n_cases=100, seed=0, h=STEP):
    """Worst relative error of d loss / d pred over ``n_cases`` random draws."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        gt, pred, t, cfg = random_loss_case(rng)
        _, grad = frame_losses(gt, pred, t, cfg)
        num = numeric_gradient(lambda: float(frame_losses(gt, pred, t, cfg)[0]), pred, h)
        worst = max(worst, relative_error(grad, num, floor=LOSS_FLOOR))
    return worst


def check_network_gradients(seed=0, h=STEP, hp=None):
    """Per-parameter worst relative error for a small perturbed model.

    The scalar checked is ``sum(y * c)`` for a fixed random ``c``, so every
    output coordinate contributes. Parameters are jittered away from their
    initial values so that no ReLU unit or gate sits at a symmetric point.
    """
    hp = hp or keyhead.HyperParams(image_height=8, image_width=8, patch=4, d=16, heads=2, layers=2)
    model = keyhead.init_model(hp, seed=seed)
    rng = np.random.default_rng(seed + 1)
    for k, v in model.params.items():
        model.params[k] = v + rng.normal(scale=0.3, size=v.shape)
    images = rng.uniform(size=(2, hp.image_height, hp.image_width))
    c = rng.normal(size=(2, hp.keypoints, 2))
    trace = keyhead.forward(model, images)
    grads = keyhead.backward(trace, model, c)

    def f():
        return float(np.sum(keyhead.forward(model, images).y * c))

    out = {}
    for name, p in model.params.items():
        num = numeric_gradient(f, p, h)
        out[name] = relative_error(grads[name], num, floor=NETWORK_FLOOR)
    return out


def run_all(seed=0):
    results = {"loss": check_loss_gradients(seed=seed)}
    results.update({f"network.{k}": v for k, v in check_network_gradients(seed=seed).items()})
    return results
