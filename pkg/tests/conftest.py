import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from blockspec.model import ModelConfig, init_draft, init_frozen, random_draft

TINY = ModelConfig(
    n_layers=2, n_draft_layers=1, d_model=16, n_heads=2, d_ff=32,
    vocab_size=8, block_slots=3, calib_hidden=8,
)
SMALL = ModelConfig(
    n_layers=4, n_draft_layers=2, d_model=16, n_heads=2, d_ff=32,
    vocab_size=32, block_slots=3, calib_hidden=8,
)


@pytest.fixture(scope="session")
def tiny_config():
    return TINY


@pytest.fixture(scope="session")
def small_config():
    return SMALL


@pytest.fixture(scope="session")
def toy_config():
    return ModelConfig()


@pytest.fixture(scope="session")
def tiny_weights(tiny_config):
    frozen = init_frozen(tiny_config, 0)
    return frozen, random_draft(tiny_config, 1)


@pytest.fixture(scope="session")
def toy_weights(toy_config):
    frozen = init_frozen(toy_config, 0)
    return frozen, random_draft(toy_config, 1)


@pytest.fixture(scope="session")
def toy_copy_draft(toy_config, toy_weights):
    frozen, _ = toy_weights
    return init_draft(toy_config, frozen, 1)


def random_tokens(rng: np.random.Generator, vocab: int, n: int) -> list[int]:
    return [int(t) for t in rng.integers(0, vocab, size=n)]
