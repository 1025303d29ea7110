import numpy as np
import pytest

from atta.nn import ModelCheckpoint, init_net
from atta.scenes import CorruptionSpec, SceneSpec, generate_scene
from atta.trainer import TrainConfig, calibrate_domain_detector, train


def small_scenes(n, seed=0, size=32, ood=False, corrupt=False):
    return [generate_scene(SceneSpec(width=size, height=size, seed=seed * 1000 + i, ood_enabled=ood,
                                     corruption=CorruptionSpec(enabled=corrupt)))
            for i in range(n)]


@pytest.fixture(scope="session")
def tiny_ckpt():
    """A quickly trained and calibrated 32x32 model."""
    scenes = small_scenes(24)
    ckpt = train(scenes, TrainConfig(epochs=8, seed=0))
    ckpt, _ = calibrate_domain_detector(ckpt, [s.image for s in scenes])
    return ckpt


@pytest.fixture
def untrained_ckpt():
    return ModelCheckpoint(init_net(seed=3), -1.0, 0.5, {})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
