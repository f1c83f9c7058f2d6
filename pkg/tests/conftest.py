import numpy as np
import pytest

from cagkit import ModelConfig, init_weights


@pytest.fixture(scope="session")
def micro_config():
    # smallest config the validator accepts: 1 layer, d_model 8
    return ModelConfig(d_model=8, n_layers=1, n_heads=2, head_dim=4,
                       d_ffn=16, max_context=512, init_seed=11)


@pytest.fixture(scope="session")
def micro_weights(micro_config):
    return init_weights(micro_config)


@pytest.fixture(scope="session")
def small_config():
    return ModelConfig(d_model=32, n_layers=2, n_heads=2, head_dim=16,
                       d_ffn=64, max_context=2048, init_seed=5)


@pytest.fixture(scope="session")
def small_weights(small_config):
    return init_weights(small_config)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
