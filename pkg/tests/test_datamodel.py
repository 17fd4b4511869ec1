import json

import numpy as np
import pytest

from dronepose.datamodel import (
    CameraIntrinsics,
    DatasetError,
    DatasetMeta,
    FrameRecord,
    ObjectModel3D,
    Pose6DoF,
    SequenceDataset,
    concat_datasets,
    load_dataset,
    save_dataset,
    validate_dataset,
    validate_record,
)
from dronepose.synth import TrajectoryConfig, generate_dataset, project_keypoints


def clean_record():
    model = ObjectModel3D.square()
    intr = CameraIntrinsics.default()
    pose = Pose6DoF(np.diag([1.0, -1.0, -1.0]), [0.1, -0.2, 5.0])
    kp = project_keypoints(model, pose, intr)
    return FrameRecord(0, "s", intr, model, kp, kp, pose)


def with_pose(rec, pose):
    return FrameRecord(rec.frame_id, rec.sequence_id, rec.intrinsics, rec.model, rec.kp2d_gt, rec.kp2d_obs, pose)


def test_default_model_layout():
    a = 0.15 / np.sqrt(2)
    assert np.allclose(ObjectModel3D.square().points, [[a, a, 0], [a, -a, 0], [-a, -a, 0], [-a, a, 0]])
    assert np.isclose(a, 0.106066, atol=1e-6)


def test_wellformed_record_is_valid():
    assert validate_record(clean_record(), noiseless=True) == []


def test_scaled_rotation_reports_both_violations():
    rec = with_pose(clean_record(), Pose6DoF(2 * np.eye(3), [0, 0, 5.0]))
    assert validate_record(rec) == ["pose.R: not orthonormal", "pose.R: det ≠ 1"]


def test_reprojection_mismatch_detected_when_noiseless():
    rec = clean_record()
    shifted = rec.kp2d_gt + np.array([1.0, 0.0])
    bad = FrameRecord(0, "s", rec.intrinsics, rec.model, shifted, shifted, rec.pose)
    assert validate_record(bad, noiseless=True) == ["keypoints_2d: reprojection mismatch"]


def test_noisy_observation_allowed_when_not_noiseless():
    rec = clean_record()
    noisy = FrameRecord(0, "s", rec.intrinsics, rec.model, rec.kp2d_gt, rec.kp2d_gt + 0.7, rec.pose)
    assert validate_record(noisy) == []


def test_bad_intrinsics_reported():
    rec = clean_record()
    intr = CameraIntrinsics(-1.0, 800.0, 320.0, 320.0, 640, 640)
    bad = FrameRecord(0, "s", intr, rec.model, rec.kp2d_gt, rec.kp2d_obs, rec.pose)
    assert any(v.startswith("intrinsics") for v in validate_record(bad))


def test_round_trip_ten_frames(tmp_path):
    ds = generate_dataset(TrajectoryConfig(n_frames=10, rotation=True, nonlinear=True, sigma_px=1.5, seed=9))
    save_dataset(ds, tmp_path / "d.jsonl")
    back = load_dataset(tmp_path / "d.jsonl")
    assert back == ds
    assert back.meta == ds.meta
    for a, b in zip(ds.records, back.records):
        assert np.array_equal(a.kp2d_gt, b.kp2d_gt)
        assert np.array_equal(a.pose.R, b.pose.R)


def test_round_trip_thousand_frames(tmp_path):
    ds = generate_dataset(TrajectoryConfig(n_frames=1000, translation=True, seed=1))
    save_dataset(ds, tmp_path / "big.jsonl")
    assert load_dataset(tmp_path / "big.jsonl") == ds


def test_record_schema_and_key_order():
    line = clean_record().to_json()
    obj = json.loads(line)
    assert list(obj) == ["frame_id", "sequence_id", "intrinsics", "model", "kp2d_gt", "kp2d_obs", "R", "t"]
    assert list(obj["intrinsics"]) == ["fx", "fy", "cx", "cy", "width", "height"]
    assert len(obj["R"]) == 9
    assert obj["R"][4] == -1.0  # row-major diag


def test_keypoint_order_preserved(tmp_path):
    rec = clean_record()
    save_dataset(SequenceDataset([rec]), tmp_path / "o.jsonl")
    assert np.array_equal(load_dataset(tmp_path / "o.jsonl").records[0].kp2d_gt, rec.kp2d_gt)


def test_empty_file_gives_empty_dataset(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    ds = load_dataset(tmp_path / "e.jsonl")
    assert len(ds) == 0 and ds.meta == DatasetMeta()


def test_empty_dataset_writes_header_only(tmp_path):
    save_dataset(SequenceDataset(), tmp_path / "h.jsonl")
    lines = (tmp_path / "h.jsonl").read_text().splitlines()
    assert len(lines) == 1 and json.loads(lines[0])["meta"]["seed"] == 0


def test_three_keypoints_error_names_line(tmp_path):
    rec = json.loads(clean_record().to_json())
    rec["kp2d_gt"] = rec["kp2d_gt"][:3]
    text = DatasetMeta().to_json() + "\n" + clean_record().to_json() + "\n" + json.dumps(rec) + "\n"
    (tmp_path / "bad.jsonl").write_text(text)
    with pytest.raises(DatasetError) as err:
        load_dataset(tmp_path / "bad.jsonl")
    assert err.value.line == 3
    assert "line 3" in str(err.value)


def test_unwritable_path_raises(tmp_path):
    with pytest.raises(OSError):
        save_dataset(SequenceDataset(), tmp_path / "missing_dir" / "x.jsonl")


def test_save_refuses_invalid(tmp_path):
    rec = with_pose(clean_record(), Pose6DoF(2 * np.eye(3), [0, 0, 5.0]))
    with pytest.raises(DatasetError):
        save_dataset(SequenceDataset([rec]), tmp_path / "x.jsonl")


def test_duplicate_frame_ids_rejected():
    rec = clean_record()
    assert validate_dataset(SequenceDataset([rec, rec]))


def test_accepted_rotation_within_tolerance(small_dataset):
    from dronepose.geometry import rotation_error

    for rec in small_dataset.records:
        ortho, det = rotation_error(rec.pose.R)
        assert ortho <= 1e-9 and det <= 1e-9


def test_records_are_immutable():
    rec = clean_record()
    with pytest.raises(ValueError):
        rec.kp2d_gt[0, 0] = 3.0


def test_concat_merges_meta():
    a = generate_dataset(TrajectoryConfig(n_frames=3, seed=1, sigma_px=1.0), sequence_id="a")
    b = generate_dataset(TrajectoryConfig(n_frames=3, seed=2, rotation=True, sigma_px=2.0), sequence_id="b", start_frame=3)
    ds = concat_datasets([a, b])
    assert len(ds) == 6 and list(ds.sequences()) == ["a", "b"]
    assert ds.meta.sigma_px == 2.0 and ds.meta.rotation and ds.meta.translation
