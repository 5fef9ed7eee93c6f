import numpy as np
import pytest

from veriforet import attacks, scenesim


SMALL_WORLD = scenesim.WorldConfig(grid_size=3, parcel_pixels=32, resolution_ratio=4, timesteps=3, seed=7)


@pytest.fixture(scope="session")
def small_world():
    return scenesim.generate_world(SMALL_WORLD)


@pytest.fixture(scope="session")
def small_dataset(small_world):
    return scenesim.build_dataset(small_world, capture_seed=3)


@pytest.fixture(scope="session")
def small_regressor(small_dataset):
    return attacks.train_cover_regressor(small_dataset, attacks.RegressorConfig(epochs=40, seed=1))


@pytest.fixture(scope="session")
def small_attacked(small_dataset, small_regressor):
    return attacks.generate_attacks(small_dataset, regressor=small_regressor,
                                    pgd=attacks.PGDParams(8 / 255, 2 / 255, 5))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
