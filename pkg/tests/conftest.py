import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))  # for oracles.py

from carunet.tensor import enable_nan_checks


@pytest.fixture(autouse=True)
def _nan_checks():
    """Every op asserts finite outputs throughout the suite."""
    enable_nan_checks(True)
    yield
    enable_nan_checks(False)
