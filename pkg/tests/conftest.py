import numpy as np
import pytest

from ssacgan.losses import LossWeights
from ssacgan.nets import ArchConfig
from ssacgan.trainer import TrainConfig, TrainingData

TINY_ARCH = ArchConfig(ngf=2, ndf=2, n_res=1)


def tiny_config(**overrides) -> TrainConfig:
    base = dict(regime="semi", epochs=3, lr_constant_epochs=1, seed=0, arch=TINY_ARCH,
                weights=LossWeights(), max_shift=1)
    base.update(overrides)
    return TrainConfig(**base)


def tiny_data(n_unpaired=4, n_paired=2, size=32, seed=0) -> TrainingData:
    """Random blobs in [-1, 1]; Y is a fixed intensity inversion of X for pairs."""
    rng = np.random.default_rng(seed)

    def slices(n):
        return np.tanh(rng.standard_normal((n, size, size))).astype(np.float32)

    px = slices(n_paired)
    return TrainingData(slices(n_unpaired), -slices(n_unpaired), px, -px)


@pytest.fixture
def data():
    return tiny_data()
