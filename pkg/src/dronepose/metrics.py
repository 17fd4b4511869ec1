"""Keypoint (OKS, SR@90/95, AP) and 6DoF (MAE-angle, RMSE, MAE-absolute) metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import geodesic_angle

OKS_KAPPA = 0.2
AP_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.951, 0.05), 2))


def oks(gt, pred, object_area, weights=None):
    """Drone OKS: mean_k exp(-d_k^2 / (0.2 * area * gamma_k^2)), gamma_k = 1 by default."""
    if not object_area > 0:
        raise ValueError("object area must be positive")
    gt = np.asarray(gt, dtype=float)
    pred = np.asarray(pred, dtype=float)
    gamma = np.ones(len(gt)) if weights is None else np.asarray(weights, dtype=float)
    d2 = np.sum((gt - pred) ** 2, axis=-1)
    return float(np.mean(np.exp(-d2 / (OKS_KAPPA * object_area * gamma**2))))


def bbox_area(kp):
    kp = np.asarray(kp, dtype=float)
    w, h = np.ptp(kp[:, 0]), np.ptp(kp[:, 1])
    return float(w * h)


def keypoint_metrics(oks_values):
    """(sr90, sr95, ap) in percent."""
    o = np.asarray(oks_values, dtype=float)
    if o.size == 0:
        raise ValueError("no OKS values")
    sr90 = 100.0 * float(np.mean(o >= 0.90))
    sr95 = 100.0 * float(np.mean(o >= 0.95))
    ap = float(np.mean([100.0 * np.mean(o >= t) for t in AP_THRESHOLDS]))
    return sr90, sr95, ap


def pose_errors(gt_poses, pred_poses):
    """Per-frame (angle error in degrees, translation error in meters)."""
    if len(gt_poses) != len(pred_poses):
        raise ValueError(f"length mismatch: {len(gt_poses)} GT vs {len(pred_poses)} predicted poses")
    ang = np.array([np.degrees(geodesic_angle(g.R, p.R)) for g, p in zip(gt_poses, pred_poses)])
    trans = np.array([np.linalg.norm(g.t - p.t) for g, p in zip(gt_poses, pred_poses)])
    return ang, trans


def pose_metrics(gt_poses, pred_poses):
    """(mae_angle_deg, rmse_m, mae_m)."""
    if len(gt_poses) == 0:
        raise ValueError("no poses")
    ang, trans = pose_errors(gt_poses, pred_poses)
    return float(ang.mean()), float(np.sqrt(np.mean(trans**2))), float(trans.mean())


@dataclass
class MetricsReport:
    """Per-sequence rows plus an overall row.

    ``overall`` pools every frame (so sequences are weighted by frame count);
    ``unweighted`` is the plain mean of the per-sequence values.
    """

    per_sequence: dict = field(default_factory=dict)
    overall: dict = field(default_factory=dict)
    unweighted: dict = field(default_factory=dict)
    oks: list = field(default_factory=list)
    n_frames: int = 0

    def rows(self):
        """Table rows: one per sequence followed by ``Avg`` (frame-weighted)."""
        out = [dict(sequence=k, **v) for k, v in self.per_sequence.items()]
        out.append(dict(sequence="Avg", **self.overall))
        return out

    def to_json(self):
        d = dict(self.overall)
        d["n_frames"] = self.n_frames
        d["per_sequence"] = self.per_sequence
        d["unweighted_mean"] = self.unweighted
        return json.dumps(d, indent=2, sort_keys=True) + "\n"


def _keypoint_block(recs, preds):
    vals = [oks(r.kp2d_gt, preds[r.frame_id], bbox_area(r.kp2d_gt)) for r in recs]
    sr90, sr95, ap = keypoint_metrics(vals)
    return vals, dict(sr90=sr90, sr95=sr95, ap=ap, mean_oks=float(np.mean(vals)))


def _pose_block(recs, poses, reference):
    gts = [reference(r) for r in recs]
    ang, trans = pose_errors(gts, [poses[r.frame_id] for r in recs])
    return (ang, trans), dict(
        mae_angle_deg=float(ang.mean()), rmse_m=float(np.sqrt(np.mean(trans**2))), mae_m=float(trans.mean())
    )


def reference_pose(record):
    """GT pose expressed the same way the geometric estimator reports it."""
    from .pose3d import camera_frame_keypoints, rotation_from_keypoints
    from .datamodel import Pose6DoF

    R, t = rotation_from_keypoints(camera_frame_keypoints(record.model, record.pose))
    return Pose6DoF(R, t)


def evaluate(dataset, predictions_kp=None, predictions_pose=None, reference=reference_pose):
    """Aggregate metrics per ``sequence_id`` and overall.

    ``predictions_kp`` maps frame id -> (4, 2) keypoints; ``predictions_pose``
    maps frame id -> Pose6DoF. Either may be ``None``.
    """
    groups = dataset.sequences()
    wanted = [r.frame_id for r in dataset.records]
    for name, preds in (("keypoint", predictions_kp), ("pose", predictions_pose)):
        if preds is not None:
            missing = [f for f in wanted if f not in preds]
            if missing:
                raise KeyError(f"missing {name} predictions for frames {missing[:10]}")
    report = MetricsReport(n_frames=len(wanted))
    all_oks, all_ang, all_trans = [], [], []
    for seq, recs in groups.items():
        row = {"n_frames": len(recs)}
        if predictions_kp is not None:
            vals, block = _keypoint_block(recs, predictions_kp)
            all_oks += vals
            row.update(block)
        if predictions_pose is not None:
            (ang, trans), block = _pose_block(recs, predictions_pose, reference)
            all_ang.append(ang)
            all_trans.append(trans)
            row.update(block)
        report.per_sequence[seq] = row
    if predictions_kp is not None and all_oks:
        sr90, sr95, ap = keypoint_metrics(all_oks)
        report.overall.update(sr90=sr90, sr95=sr95, ap=ap, mean_oks=float(np.mean(all_oks)))
        report.oks = all_oks
    if predictions_pose is not None and all_ang:
        ang, trans = np.concatenate(all_ang), np.concatenate(all_trans)
        report.overall.update(
            mae_angle_deg=float(ang.mean()), rmse_m=float(np.sqrt(np.mean(trans**2))), mae_m=float(trans.mean())
        )
    keys = [k for k in report.overall]
    report.unweighted = {
        k: float(np.mean([row[k] for row in report.per_sequence.values()])) for k in keys
    }
    return report
