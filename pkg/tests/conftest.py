import numpy as np
import pytest

from sbl.data import SynthConfig, synthesize_dataset
from sbl.salience import FrozenExtractor


@pytest.fixture(scope="session")
def small_dataset():
    return synthesize_dataset(SynthConfig(num_images=8, image_size=128, seed=5))


@pytest.fixture(scope="session")
def extractor():
    return FrozenExtractor(seed=0)


@pytest.fixture()
def rng():
    return np.random.default_rng(42)
