import numpy as np
import pytest

from ..app.model import init_model
from ..app.schemas import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(7)


@pytest.fixture
def example_scores():
    """Two-token matrix used throughout the routing examples."""
    return np.array([[0.5, 0.45, 0.05], [0.34, 0.33, 0.33]])


@pytest.fixture
def random_scores(rng):
    def make(n_tokens, n_experts):
        return rng.dirichlet(np.ones(n_experts), size=n_tokens)
    return make


@pytest.fixture(scope="module")
def tiny_config():
    return ModelConfig(vocab_size=8, d_model=4, d_hidden=6, n_experts=4, n_layers=2)


@pytest.fixture(scope="module")
def tiny_model(tiny_config):
    return init_model(tiny_config, seed=13)
