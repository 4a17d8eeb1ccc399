import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def gd():
    from wgmesr.spinham import gd_cawo4

    return gd_cawo4()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
