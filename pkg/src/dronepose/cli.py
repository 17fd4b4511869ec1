"""Command-line entry point: ``dronepose <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import keyhead, pose3d, synth, tracking, trainer
from .datamodel import (
    CameraIntrinsics,
    DatasetError,
    ObjectModel3D,
    Pose6DoF,
    concat_datasets,
    load_dataset,
    save_dataset,
)
from .losses import LossConfig
from .metrics import evaluate

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("dronepose")

# checked before the data errors: several of these subclass ValueError
NUMERIC_ERRORS = (
    pose3d.DegenerateConfigurationError,
    pose3d.CheiralityError,
    ArithmeticError,
    np.linalg.LinAlgError,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------- pose files

def write_poses(rows, path):
    """Per-frame pose JSONL: frame_id, sequence_id, R (row-major), t, reproj_rmse, converged."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            out = {
                "frame_id": int(row["frame_id"]),
                "sequence_id": row.get("sequence_id"),
                "R": np.asarray(row["R"]).ravel().tolist(),
                "t": np.asarray(row["t"]).tolist(),
                "reproj_rmse": row.get("reproj_rmse"),
                "converged": row.get("converged"),
            }
            fh.write(json.dumps(out, separators=(",", ":")) + "\n")


def read_poses(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                row["R"] = np.array(row["R"], dtype=float).reshape(3, 3)
                row["t"] = np.array(row["t"], dtype=float).reshape(3)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{path}: bad pose row ({exc})", line=lineno) from None
            rows.append(row)
    return rows


def _pose_map(rows):
    return {int(r["frame_id"]): Pose6DoF(r["R"], r["t"]) for r in rows}


def solve_rows(dataset, keypoints):
    """Run the geometric estimator on every frame; ``keypoints`` maps frame id -> (4, 2)."""
    rows = []
    for rec in dataset.records:
        pose, sol = pose3d.estimate_pose(keypoints[rec.frame_id], rec.model, rec.intrinsics, return_solution=True)
        rows.append(
            dict(
                frame_id=rec.frame_id, sequence_id=rec.sequence_id, R=pose.R, t=pose.t,
                reproj_rmse=sol.reprojection_rmse, converged=sol.converged,
            )
        )
    return rows


def smooth_rows(rows, **kw):
    groups = {}
    for row in rows:
        groups.setdefault(row.get("sequence_id"), []).append(row)
    out = []
    for seq_rows in groups.values():
        poses = tracking.smooth_sequence([Pose6DoF(r["R"], r["t"]) for r in seq_rows], **kw)
        for row, pose in zip(seq_rows, poses):
            out.append(dict(row, R=pose.R, t=pose.t))
    out.sort(key=lambda r: r["frame_id"])
    return out


# ---------------------------------------------------------------- commands

def cmd_generate(args):
    cfg = synth.TrajectoryConfig(
        n_frames=args.frames, translation=args.translation, rotation=args.rotation, nonlinear=args.nonlinear,
        depth_range=(args.depth_min, args.depth_max), angular_rate_max=args.angular_rate, seed=args.seed,
        sigma_px=args.sigma,
    )
    intr = CameraIntrinsics(args.fx, args.fx, args.width / 2.0, args.height / 2.0, args.width, args.height)
    ds = synth.generate_dataset(cfg, ObjectModel3D.square(args.half_diagonal), intr, sequence_id=args.sequence_id)
    save_dataset(ds, args.out)
    log.info("wrote %d frames to %s", len(ds), args.out)


def _train_config(args):
    cfg = trainer.TrainConfig.from_json(args.config) if args.config else trainer.TrainConfig(seed=args.seed)
    if args.epochs is not None:
        cfg.epochs = args.epochs
    cfg.checkpoint_path = args.out
    cfg.log_path = args.log
    return cfg


def cmd_train(args):
    ds = load_dataset(args.data)
    cfg = _train_config(args)
    model = keyhead.init_model(trainer.hyperparams_for(ds, cfg.model), seed=cfg.seed)
    _, rows = trainer.train(ds, model, cfg)
    log.info("final loss %.6g", rows[-1]["loss"])


def cmd_predict(args):
    ds = load_dataset(args.data)
    model = keyhead.load_model(args.model)
    preds = trainer.predict(ds, model)
    trainer.write_predictions(ds, preds, args.out)


def cmd_solve_pose(args):
    ds = load_dataset(args.data)
    if args.pred:
        kp = trainer.read_predictions(args.pred)
    elif args.use_obs:
        kp = {r.frame_id: r.kp2d_obs for r in ds.records}
    else:
        kp = {r.frame_id: r.kp2d_gt for r in ds.records}
    missing = [r.frame_id for r in ds.records if r.frame_id not in kp]
    if missing:
        raise DatasetError(f"no keypoints for frames {missing[:10]}")
    write_poses(solve_rows(ds, kp), args.out)


def _kalman_kwargs(args):
    return dict(
        q_pos=args.q_pos, q_rot=args.q_rot, r_pos=args.r_pos, r_rot=args.r_rot,
        filter_rotation=not args.no_rotation,
    )


def cmd_smooth(args):
    write_poses(smooth_rows(read_poses(args.inp), **_kalman_kwargs(args)), args.out)


def _write_report(report, path):
    text = report.to_json()
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_eval_kp(args):
    ds = load_dataset(args.data)
    _write_report(evaluate(ds, predictions_kp=trainer.read_predictions(args.pred)), args.out)


def cmd_eval_pose(args):
    ds = load_dataset(args.data)
    _write_report(evaluate(ds, predictions_pose=_pose_map(read_poses(args.pred))), args.out)


def cmd_gradcheck(args):
    from .gradcheck import run_all

    results = run_all(seed=args.seed)
    worst = 0.0
    for name, err in results.items():
        print(f"{name}: max relative error {err:.3e}")
        worst = max(worst, err)
    print(f"max relative error {worst:.3e}")
    if worst > args.tol:
        raise FloatingPointError(f"gradient check failed: {worst:.3e} > {args.tol:.1e}")


def cmd_gate_dump(args):
    ds = load_dataset(args.data)
    model = keyhead.load_model(args.model)
    trainer.check_compatible(ds, model)
    w = keyhead.dump_gate_weights(model, trainer.render_dataset(ds, model.hp.patch))
    text = keyhead.gate_csv(w)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# motion taxonomy: (name, translation, rotation, nonlinear)
PIPELINE_SEQUENCES = (("seq11", True, False, False), ("seq12", True, False, True), ("seq13", True, True, True))


def pipeline_intrinsics():
    return CameraIntrinsics(fx=160.0, fy=160.0, cx=32.0, cy=32.0, width=64, height=64)


def cmd_pipeline(args):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    intr = pipeline_intrinsics()
    parts, start = [], 0
    for i, (name, tr, rot, nl) in enumerate(PIPELINE_SEQUENCES):
        cfg = synth.TrajectoryConfig(
            n_frames=args.frames, translation=tr, rotation=rot, nonlinear=nl, depth_range=(1.4, 2.6),
            angular_rate_max=args.angular_rate, seed=args.seed * 1000 + i, sigma_px=args.sigma,
        )
        parts.append(synth.generate_dataset(cfg, intr=intr, sequence_id=name, start_frame=start))
        start += args.frames
    ds = concat_datasets(parts)
    ds = concat_datasets([ds], meta=replace(ds.meta, seed=args.seed))
    save_dataset(ds, out / "dataset.jsonl")

    cfg = trainer.TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr, seed=args.seed,
        loss=LossConfig(), checkpoint_path=str(out / "model.json"), log_path=str(out / "train_log.csv"),
    )
    model = keyhead.init_model(trainer.hyperparams_for(ds), seed=args.seed)
    images = trainer.render_dataset(ds, model.hp.patch)
    trainer.train(ds, model, cfg, images=images)
    preds = trainer.predict(ds, model, images=images)
    trainer.write_predictions(ds, preds, out / "pred_kp.jsonl")
    (out / "gates.csv").write_text(keyhead.gate_csv(keyhead.dump_gate_weights(model, images)), encoding="utf-8")

    kp = {r.frame_id: p for r, p in zip(ds.records, preds)}
    rows = []
    for rec in ds.records:
        try:
            rows += solve_rows(_single(ds, rec), kp)
        except (pose3d.DegenerateConfigurationError, pose3d.CheiralityError) as exc:
            log.warning("frame %d: %s; falling back to observed keypoints", rec.frame_id, exc)
            rows += solve_rows(_single(ds, rec), {rec.frame_id: rec.kp2d_obs})
    write_poses(rows, out / "poses.jsonl")
    smoothed = smooth_rows(rows, **_kalman_kwargs(args))
    write_poses(smoothed, out / "poses_smoothed.jsonl")

    kp_report = evaluate(ds, predictions_kp=kp)
    pose_report = evaluate(ds, predictions_pose=_pose_map(smoothed))
    (out / "report_kp.json").write_text(kp_report.to_json(), encoding="utf-8")
    (out / "report_pose.json").write_text(pose_report.to_json(), encoding="utf-8")
    combined = evaluate(ds, predictions_kp=kp, predictions_pose=_pose_map(smoothed))
    (out / "report.json").write_text(combined.to_json(), encoding="utf-8")
    if not args.quiet:
        sys.stdout.write(combined.to_json())


def _single(ds, rec):
    return type(ds)(records=[rec], meta=ds.meta)


# ---------------------------------------------------------------- parser

def _add_kalman_flags(p):
    p.add_argument("--q-pos", type=float, default=tracking.Q_POS, help="position process noise (m^2/frame^2)")
    p.add_argument("--q-rot", type=float, default=tracking.Q_ROT, help="rotation process noise (rad^2/frame^2)")
    p.add_argument("--r-pos", type=float, default=tracking.R_POS, help="position measurement noise (m^2)")
    p.add_argument("--r-rot", type=float, default=tracking.R_ROT, help="rotation measurement noise (rad^2)")
    p.add_argument("--no-rotation", action="store_true", help="filter translation only")


def build_parser():
    def global_flags(top):
        p = _Parser(add_help=False)
        sup = {} if top else {"default": argparse.SUPPRESS}
        p.add_argument("--seed", type=int, help="random seed (default 0)", **(sup or {"default": 0}))
        p.add_argument("--threads", type=int, help="cap BLAS/OpenMP threads", **sup)
        p.add_argument("--quiet", action="store_true", help="only print errors", **sup)
        return p

    # globals may come before or after the subcommand; the sub-level copies
    # must not reset values given at the top level
    common = global_flags(top=False)
    parser = _Parser(prog="dronepose", description=__doc__.splitlines()[0], parents=[global_flags(top=True)])
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("generate", parents=[common], help="generate a synthetic sequence")
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--translation", action="store_true")
    p.add_argument("--rotation", action="store_true")
    p.add_argument("--nonlinear", action="store_true")
    p.add_argument("--sigma", type=float, default=0.0, help="keypoint noise std-dev in pixels")
    p.add_argument("--out", required=True)
    p.add_argument("--sequence-id", default="seq")
    p.add_argument("--width", type=int, default=640)
    p.add_argument("--height", type=int, default=640)
    p.add_argument("--fx", type=float, default=800.0, help="focal length in pixels (fx = fy)")
    p.add_argument("--depth-min", type=float, default=3.0)
    p.add_argument("--depth-max", type=float, default=8.0)
    p.add_argument("--angular-rate", type=float, default=1.0, help="max rotation per frame (deg)")
    p.add_argument("--half-diagonal", type=float, default=0.15, help="propeller half-diagonal (m)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", parents=[common], help="train the keypoint model")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="CSV log path (epoch,loss,scale)")
    p.add_argument("--epochs", type=int, help="override config epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="predict keypoints with a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("solve-pose", parents=[common], help="6DoF from keypoints via PnP")
    p.add_argument("--data", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--pred", help="keypoint predictions JSONL")
    src.add_argument("--use-gt", action="store_true", help="use the clean GT keypoints")
    src.add_argument("--use-obs", action="store_true", help="use the noisy observed keypoints")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_solve_pose)

    p = sub.add_parser("smooth", parents=[common], help="Kalman-filter a pose JSONL file")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    _add_kalman_flags(p)
    p.set_defaults(func=cmd_smooth)

    for name, func, what in (("eval-kp", cmd_eval_kp, "keypoint"), ("eval-pose", cmd_eval_pose, "pose")):
        p = sub.add_parser(name, parents=[common], help=f"evaluate {what} predictions")
        p.add_argument("--data", required=True)
        p.add_argument("--pred", required=True)
        p.add_argument("--out", help="report JSON path (stdout if omitted)")
        p.set_defaults(func=func)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gate-dump", parents=[common], help="mean gate weight per encoder layer (CSV)")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="CSV path (stdout if omitted)")
    p.set_defaults(func=cmd_gate_dump)

    p = sub.add_parser("pipeline", parents=[common], help="generate -> train -> predict -> pose -> smooth -> eval")
    p.add_argument("--frames", type=int, default=64, help="frames per sequence")
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--angular-rate", type=float, default=2.0)
    p.add_argument("--out-dir", required=True)
    _add_kalman_flags(p)
    p.set_defaults(func=cmd_pipeline)
    return parser


def _thread_limit(n):
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO, format="%(levelname)s %(message)s")
    try:
        with _thread_limit(args.threads):
            args.func(args)
    except NUMERIC_ERRORS as exc:
        print(f"dronepose {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, FileNotFoundError, IsADirectoryError, PermissionError, KeyError, ValueError) as exc:
        print(f"dronepose {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"dronepose {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
