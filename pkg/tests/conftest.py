import os
import sys

import numpy as np
import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CONFIGS = os.path.join(ROOT, "configs")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def config_path():
    def _path(name):
        return os.path.join(CONFIGS, name)
    return _path
