import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))  # make oracles importable

from epiwave.data import ChannelMap


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_map():
    return ChannelMap(
        channels=["a1", "a2", "b1", "b2", "b3", "c1"],
        regions=["A", "B", "C"],
        assignment={"a1": "A", "a2": "A", "b1": "B", "b2": "B", "b3": "B", "c1": "C"},
    )


@pytest.fixture(autouse=True)
def _torch_determinism():
    torch.manual_seed(0)
