"""Shared fixtures for the navtrace test suite."""

import numpy as np
import pytest

from navtrace.geometry import CameraModel, RigidTransform, Rotation


@pytest.fixture
def camera() -> CameraModel:
    """The published hardware's pinhole: 1920x1280, 65 deg HFOV."""
    return CameraModel(fx=1506.9, fy=1506.9, cx=960.0, cy=640.0)


@pytest.fixture
def distorted_camera() -> CameraModel:
    return CameraModel(
        fx=1506.9, fy=1506.9, cx=960.0, cy=640.0,
        distortion=np.array([-0.2, 0.05, 0.001, -0.0005, 0.01]))


def random_rotation(rng: np.random.Generator) -> Rotation:
    return Rotation(rng.normal(size=4))


def random_transform(rng: np.random.Generator,
                     translation_scale: float = 1000.0) -> RigidTransform:
    return RigidTransform(random_rotation(rng),
                          rng.uniform(-translation_scale, translation_scale, 3))
