import numpy as np
import pytest

from rangeslam.geometry import CameraIntrinsics, Pose, Rotation
from rangeslam.sim import NoiseConfig, WorldConfig, make_scenario


def random_rotation(rng) -> Rotation:
    q = rng.standard_normal(4)
    return Rotation(q / np.linalg.norm(q))


def random_pose(rng, spread: float = 5.0) -> Pose:
    return Pose(random_rotation(rng), rng.uniform(-spread, spread, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def K():
    return CameraIntrinsics(400.0, 410.0, 320.0, 240.0, 640, 480)


@pytest.fixture(scope="session")
def small_world_config():
    return WorldConfig(
        trajectory="figure-eight", length=12.0, width=6.0, n_keyframes=20,
        n_map_points=60, seed=3,
    )


@pytest.fixture(scope="session")
def noiseless_scenario(small_world_config):
    return make_scenario(small_world_config, NoiseConfig.noiseless())


@pytest.fixture(scope="session")
def noisy_scenario(small_world_config):
    return make_scenario(small_world_config, NoiseConfig())
