"""Drone keypoint regression and 6DoF pose estimation on synthetic frames.

Pipeline: ``synth`` draws trajectories and renders frames, ``keyhead`` regresses
four propeller keypoints with a small transformer encoder, ``trainer`` fits it
under the losses in ``losses``, ``pose3d`` recovers 6DoF poses by PnP,
``tracking`` smooths them with a Kalman filter and ``metrics`` scores both
stages.
"""

from .datamodel import (
    CameraIntrinsics,
    DatasetError,
    DatasetMeta,
    FrameRecord,
    ObjectModel3D,
    Pose6DoF,
    SequenceDataset,
    load_dataset,
    save_dataset,
)

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "DatasetError",
    "DatasetMeta",
    "FrameRecord",
    "ObjectModel3D",
    "Pose6DoF",
    "SequenceDataset",
    "load_dataset",
    "save_dataset",
]
