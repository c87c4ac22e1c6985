import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from epifusion.geometry import CameraParams, intrinsics, look_at
from epifusion.synthetic import standard_rig


def random_camera(rng, width=128, height=128):
    """Camera 2-5 m from the origin looking roughly at it, random focal/principal point."""
    eye = rng.normal(size=3)
    eye *= rng.uniform(2000, 5000) / np.linalg.norm(eye)
    target = rng.normal(scale=200, size=3)
    up = rng.normal(size=3)
    R, t = look_at(eye, target, up)
    roll = Rotation.from_rotvec([0, 0, rng.uniform(-0.2, 0.2)]).as_matrix()
    R = roll @ R
    t = -R @ eye
    f = rng.uniform(80, 400)
    K = intrinsics(f, f * rng.uniform(0.9, 1.1), width / 2 + rng.uniform(-5, 5), height / 2 + rng.uniform(-5, 5))
    return CameraParams(K, R, t, width, height)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def rig():
    return standard_rig(0)


@pytest.fixture(scope="session")
def cams(rig):
    return rig.cameras
