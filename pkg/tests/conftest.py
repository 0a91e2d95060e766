import numpy as np
import pytest

# Desk-scale target for tests that grind real nonces: ~16 attempts per block.
EASY_TARGET = 1 << 252


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
