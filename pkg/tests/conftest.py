import numpy as np
import pytest

from fpqkd.config import RunConfig
from fpqkd.pipeline import Setup


@pytest.fixture(scope="session")
def setup_std():
    cfg = RunConfig()
    return Setup(cfg.region_list())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
