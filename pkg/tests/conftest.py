import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from bandfuse import autodiff as ad


@pytest.fixture(autouse=True)
def finite_checks():
    ad.set_finite_checks(True)
    yield
    ad.set_finite_checks(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
