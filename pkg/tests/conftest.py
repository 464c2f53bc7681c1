import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pamstereo import set_check_finite, set_default_dtype


@pytest.fixture(autouse=True)
def _verification_mode():
    """Run every test at 64-bit with finiteness checks on."""
    set_default_dtype(np.float64)
    set_check_finite(True)
    yield
    set_check_finite(False)
    set_default_dtype(np.float32)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
