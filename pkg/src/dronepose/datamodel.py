"""Core value types and the JSON Lines dataset format.

A dataset file starts with one metadata line followed by one frame record per
line::

    {"meta":{"seed":0,"sigma_px":0.0,"translation":true,"rotation":false,"nonlinear":false}}
    {"frame_id":0,"sequence_id":"seq11","intrinsics":{...},"model":[[x,y,z],...],
     "kp2d_gt":[[u,v],...],"kp2d_obs":[[u,v],...],"R":[r00,...,r22],"t":[tx,ty,tz]}

Floats are written with ``repr`` precision so a save/load cycle is bit-exact.
A single file may hold several sequences; frame ids must increase strictly over
the whole file and intrinsics/model must agree within each ``sequence_id``.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import rotation_error

NUM_KEYPOINTS = 4
REPROJECTION_TOL_PX = 1e-6
ROTATION_TOL = 1e-9


class DatasetError(ValueError):
    """Malformed or invalid dataset content. ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


def _frozen(a, shape=None):
    arr = np.array(a, dtype=float)
    if shape is not None and arr.shape != shape:
        raise ValueError(f"expected shape {shape}, got {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    @property
    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @classmethod
    def default(cls):
        return cls(fx=800.0, fy=800.0, cx=320.0, cy=320.0, width=640, height=640)

    def violations(self):
        out = []
        if not self.fx > 0:
            out.append("intrinsics.fx: not positive")
        if not self.fy > 0:
            out.append("intrinsics.fy: not positive")
        if not 0 < self.cx < self.width:
            out.append("intrinsics.cx: outside (0, width)")
        if not 0 < self.cy < self.height:
            out.append("intrinsics.cy: outside (0, height)")
        return out

    def to_dict(self):
        return OrderedDict(
            fx=float(self.fx), fy=float(self.fy), cx=float(self.cx), cy=float(self.cy),
            width=int(self.width), height=int(self.height),
        )


@dataclass(frozen=True, eq=False)
class ObjectModel3D:
    """Four coplanar propeller positions in the drone body frame (meters).

    Index 0 is the (+x, +y) propeller; the rest follow clockwise when looking
    down the body -z axis: (+x, -y), (-x, -y), (-x, +y).
    """

    points: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "points", _frozen(self.points))

    @classmethod
    def square(cls, half_diagonal=0.15):
        a = half_diagonal / np.sqrt(2.0)
        return cls(np.array([[a, a, 0.0], [a, -a, 0.0], [-a, -a, 0.0], [-a, a, 0.0]]))

    def __eq__(self, other):
        return isinstance(other, ObjectModel3D) and np.array_equal(self.points, other.points)

    def violations(self):
        p = self.points
        if p.shape != (NUM_KEYPOINTS, 3):
            return [f"model: expected shape (4, 3), got {p.shape}"]
        if not np.all(np.isfinite(p)):
            return ["model: non-finite coordinates"]
        out = []
        centroid = p.mean(axis=0)
        scale = max(float(np.abs(p).max()), 1.0)
        if np.linalg.norm(centroid) > 1e-9 * scale:
            out.append("model: centroid not at body origin")
        s = np.linalg.svd(p - centroid, compute_uv=False)
        if s[-1] > 1e-9 * s[0]:
            out.append("model: points not coplanar")
        return out


@dataclass(frozen=True, eq=False)
class Pose6DoF:
    """Rotation ``R`` and translation ``t`` mapping body-frame points into the camera frame."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", _frozen(self.R, (3, 3)))
        object.__setattr__(self, "t", _frozen(np.ravel(self.t), (3,)))

    @classmethod
    def identity(cls, t=(0.0, 0.0, 0.0)):
        return cls(np.eye(3), np.asarray(t, dtype=float))

    def __eq__(self, other):
        return (
            isinstance(other, Pose6DoF)
            and np.array_equal(self.R, other.R)
            and np.array_equal(self.t, other.t)
        )

    def transform(self, points):
        return np.asarray(points, dtype=float) @ self.R.T + self.t

    def violations(self):
        out = []
        if not (np.all(np.isfinite(self.R)) and np.all(np.isfinite(self.t))):
            return ["pose: non-finite entries"]
        ortho, det = rotation_error(self.R)
        if ortho > ROTATION_TOL:
            out.append("pose.R: not orthonormal")
        if det > ROTATION_TOL:
            out.append("pose.R: det ≠ 1")
        return out


def keypoint_violations(kp, name):
    kp = np.asarray(kp, dtype=float)
    if kp.shape != (NUM_KEYPOINTS, 2):
        return [f"{name}: expected 4 (x, y) points, got shape {kp.shape}"]
    if not np.all(np.isfinite(kp)):
        return [f"{name}: non-finite coordinates"]
    return []


@dataclass(frozen=True, eq=False)
class FrameRecord:
    frame_id: int
    sequence_id: str
    intrinsics: CameraIntrinsics
    model: ObjectModel3D
    kp2d_gt: np.ndarray
    kp2d_obs: np.ndarray
    pose: Pose6DoF

    def __post_init__(self):
        object.__setattr__(self, "kp2d_gt", _frozen(self.kp2d_gt))
        object.__setattr__(self, "kp2d_obs", _frozen(self.kp2d_obs))

    @property
    def keypoints_2d(self):
        return self.kp2d_gt

    def __eq__(self, other):
        return (
            isinstance(other, FrameRecord)
            and self.frame_id == other.frame_id
            and self.sequence_id == other.sequence_id
            and self.intrinsics == other.intrinsics
            and self.model == other.model
            and np.array_equal(self.kp2d_gt, other.kp2d_gt)
            and np.array_equal(self.kp2d_obs, other.kp2d_obs)
            and self.pose == other.pose
        )

    def to_json(self):
        d = OrderedDict()
        d["frame_id"] = int(self.frame_id)
        d["sequence_id"] = str(self.sequence_id)
        d["intrinsics"] = self.intrinsics.to_dict()
        d["model"] = self.model.points.tolist()
        d["kp2d_gt"] = self.kp2d_gt.tolist()
        d["kp2d_obs"] = self.kp2d_obs.tolist()
        d["R"] = self.pose.R.ravel().tolist()
        d["t"] = self.pose.t.tolist()
        return json.dumps(d, separators=(",", ":"), ensure_ascii=False)

    @classmethod
    def from_json(cls, obj):
        intr = obj["intrinsics"]
        return cls(
            frame_id=int(obj["frame_id"]),
            sequence_id=str(obj["sequence_id"]),
            intrinsics=CameraIntrinsics(
                fx=float(intr["fx"]), fy=float(intr["fy"]),
                cx=float(intr["cx"]), cy=float(intr["cy"]),
                width=int(intr["width"]), height=int(intr["height"]),
            ),
            model=ObjectModel3D(_matrix(obj["model"], 3, "model")),
            kp2d_gt=_matrix(obj["kp2d_gt"], 2, "kp2d_gt"),
            kp2d_obs=_matrix(obj["kp2d_obs"], 2, "kp2d_obs"),
            pose=Pose6DoF(np.reshape(_vector(obj["R"], 9, "R"), (3, 3)), _vector(obj["t"], 3, "t")),
        )


def _matrix(rows, width, name):
    arr = np.array(rows, dtype=float)
    if arr.shape != (NUM_KEYPOINTS, width):
        raise ValueError(f"{name}: expected {NUM_KEYPOINTS} rows of {width} values, got shape {arr.shape}")
    return arr


def _vector(values, n, name):
    arr = np.array(values, dtype=float)
    if arr.shape != (n,):
        raise ValueError(f"{name}: expected {n} values, got shape {arr.shape}")
    return arr


@dataclass
class DatasetMeta:
    seed: int = 0
    sigma_px: float = 0.0
    translation: bool = False
    rotation: bool = False
    nonlinear: bool = False

    def to_json(self):
        meta = OrderedDict(
            seed=int(self.seed), sigma_px=float(self.sigma_px), translation=bool(self.translation),
            rotation=bool(self.rotation), nonlinear=bool(self.nonlinear),
        )
        return json.dumps({"meta": meta}, separators=(",", ":"))


@dataclass(eq=False)
class SequenceDataset:
    records: list = field(default_factory=list)
    meta: DatasetMeta = field(default_factory=DatasetMeta)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __eq__(self, other):
        return (
            isinstance(other, SequenceDataset)
            and self.meta == other.meta
            and len(self.records) == len(other.records)
            and all(a == b for a, b in zip(self.records, other.records))
        )

    def sequences(self):
        """Records grouped by ``sequence_id`` in first-appearance order."""
        groups = OrderedDict()
        for rec in self.records:
            groups.setdefault(rec.sequence_id, []).append(rec)
        return groups


def validate_record(record, noiseless=False):
    """Return a list of invariant violations; empty when the record is well formed.

    ``kp2d_gt`` must always equal the projection of the model through the pose.
    With ``noiseless=True`` the observed keypoints must also equal the GT ones.
    """
    from .synth import camera_points, pinhole

    out = []
    if record.frame_id < 0:
        out.append("frame_id: negative")
    out += record.intrinsics.violations()
    model_bad = record.model.violations()
    out += model_bad
    gt_bad = keypoint_violations(record.kp2d_gt, "keypoints_2d")
    out += gt_bad
    obs_bad = keypoint_violations(record.kp2d_obs, "keypoints_obs")
    out += obs_bad
    pose_bad = record.pose.violations()
    out += pose_bad
    if model_bad or pose_bad or gt_bad:
        return out
    pc = camera_points(record.model.points, record.pose)
    if np.any(pc[:, 2] <= 0):
        out.append("pose: keypoint at or behind camera plane")
        return out
    proj = pinhole(pc, record.intrinsics)
    if np.max(np.abs(proj - record.kp2d_gt)) > REPROJECTION_TOL_PX:
        out.append("keypoints_2d: reprojection mismatch")
    if noiseless and not obs_bad and np.max(np.abs(record.kp2d_obs - record.kp2d_gt)) > REPROJECTION_TOL_PX:
        out.append("keypoints_obs: differs from keypoints_2d in a noiseless dataset")
    return out


def validate_dataset(dataset):
    """Record-level violations prefixed by frame id, plus sequence-level ones."""
    out = []
    noiseless = dataset.meta.sigma_px == 0
    prev = None
    first = {}
    for rec in dataset.records:
        out += [f"frame {rec.frame_id}: {v}" for v in validate_record(rec, noiseless=noiseless)]
        if prev is not None and rec.frame_id <= prev:
            out.append(f"frame {rec.frame_id}: frame_id not strictly increasing")
        prev = rec.frame_id
        ref = first.setdefault(rec.sequence_id, rec)
        if ref.intrinsics != rec.intrinsics or ref.model != rec.model:
            out.append(f"frame {rec.frame_id}: intrinsics/model differ within sequence {rec.sequence_id!r}")
    return out


def save_dataset(dataset, path):
    problems = validate_dataset(dataset)
    if problems:
        raise DatasetError("refusing to save invalid dataset: " + "; ".join(problems[:5]))
    lines = [dataset.meta.to_json()] + [rec.to_json() for rec in dataset.records]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path):
    text = Path(path).read_text(encoding="utf-8")
    meta = DatasetMeta()
    records = []
    noiseless = True
    prev = None
    first = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"invalid JSON ({exc.msg})", line=lineno) from None
        if lineno == 1 and isinstance(obj, dict) and "meta" in obj:
            m = obj["meta"]
            try:
                meta = DatasetMeta(
                    seed=int(m["seed"]), sigma_px=float(m["sigma_px"]),
                    translation=bool(m["translation"]), rotation=bool(m["rotation"]),
                    nonlinear=bool(m["nonlinear"]),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"bad metadata: {exc}", line=lineno) from None
            noiseless = meta.sigma_px == 0
            continue
        try:
            rec = FrameRecord.from_json(obj)
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"bad record: {exc}", line=lineno) from None
        problems = validate_record(rec, noiseless=noiseless)
        if prev is not None and rec.frame_id <= prev:
            problems.append("frame_id not strictly increasing")
        ref = first.setdefault(rec.sequence_id, rec)
        if ref.intrinsics != rec.intrinsics or ref.model != rec.model:
            problems.append(f"intrinsics/model differ within sequence {rec.sequence_id!r}")
        if problems:
            raise DatasetError(f"record {rec.frame_id}: " + "; ".join(problems), line=lineno)
        prev = rec.frame_id
        records.append(rec)
    return SequenceDataset(records=records, meta=meta)


def concat_datasets(datasets, meta=None):
    """Concatenate datasets whose frame ids already increase across the inputs."""
    records = [rec for ds in datasets for rec in ds.records]
    if meta is None:
        meta = DatasetMeta(
            seed=datasets[0].meta.seed if datasets else 0,
            sigma_px=max((ds.meta.sigma_px for ds in datasets), default=0.0),
            translation=any(ds.meta.translation for ds in datasets),
            rotation=any(ds.meta.rotation for ds in datasets),
            nonlinear=any(ds.meta.nonlinear for ds in datasets),
        )
    return SequenceDataset(records=records, meta=meta)
