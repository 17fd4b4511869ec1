import numpy as np
import pytest

from dronepose.datamodel import CameraIntrinsics
from dronepose.synth import TrajectoryConfig, generate_dataset


TOY_INTR = CameraIntrinsics(fx=160.0, fy=160.0, cx=32.0, cy=32.0, width=64, height=64)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_dataset():
    cfg = TrajectoryConfig(n_frames=10, translation=True, rotation=True, nonlinear=True, seed=4, sigma_px=1.0)
    return generate_dataset(cfg, sequence_id="s1")


@pytest.fixture
def toy_dataset():
    cfg = TrajectoryConfig(
        n_frames=6, translation=True, rotation=True, depth_range=(1.4, 2.6), angular_rate_max=3.0, seed=2
    )
    return generate_dataset(cfg, intr=TOY_INTR, sequence_id="toy")


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
