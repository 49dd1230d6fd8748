import numpy as np
import pytest

from entitylink.encoder import EncoderConfig
from entitylink.model import init_model
from entitylink.synthetic import generate_synthetic_corpus


@pytest.fixture(scope="session")
def small_synth():
    return generate_synthetic_corpus(20, 60, seed=1)


@pytest.fixture
def tiny_model():
    return init_model(EncoderConfig(dim=8), hidden=16, seed=3, md_scale=1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
