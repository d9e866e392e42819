import numpy as np
import pytest

from moe_lens.model import ModelConfig, random_model
from moe_lens.split import ClusterConfig, split_model


@pytest.fixture(scope="session")
def tiny_config():
    # vocab covers the byte tokenizer (259 ids) with headroom
    return ModelConfig(n_layers=2, d_model=16, d_ff=32, n_heads=2,
                       vocab_size=320, max_seq_len=64)


@pytest.fixture(scope="session")
def tiny_model(tiny_config):
    return random_model(tiny_config, seed=7)


@pytest.fixture(scope="session")
def tiny_partition(tiny_model):
    return split_model(tiny_model, ClusterConfig(n_experts=4, seed=3))


@pytest.fixture(scope="session")
def tiny_tokens():
    return [1, 5, 9, 2, 30]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
