import numpy as np
import pytest

from nser_ibvs.config import Config
from nser_ibvs.simkit import Scene, capture_reference, goal_pose


@pytest.fixture(scope="session")
def cfg():
    return Config()


@pytest.fixture(scope="session")
def scene(cfg):
    return Scene.from_config(cfg)


@pytest.fixture(scope="session")
def goal(cfg, scene):
    return goal_pose(scene, cfg.world.altitude)


@pytest.fixture(scope="session")
def desired(scene, goal):
    return capture_reference(goal, scene)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
