import numpy as np
import pytest
from hypothesis import settings

from shipid import datagen as dg
from shipid.dataset import Dataset

settings.register_profile("shipid", deadline=None, max_examples=60)
settings.load_profile("shipid")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset() -> Dataset:
    """Four short clean trajectories (turning, zigzag, random, berthing) in light wind."""
    wind = dg.WindScenario(speed=0.5, gust_sigma=0.1)
    recipe = [(dg.ManeuverSpec(k, 30.0), 1) for k in dg.KINDS]
    return dg.compose_dataset(recipe, wind=wind, seed=7)
