import numpy as np
import pytest

from dqpn import default_params

# Log-spaced 10..1000 Hz, snapped onto the 2.5 Hz sweep quantum. This is
# the grid every simulation-backed sweep in the suite runs on.
SNAP20 = np.array([10.0, 12.5, 15.0, 20.0, 27.5, 32.5, 42.5, 55.0, 70.0,
                   87.5, 112.5, 145.0, 182.5, 232.5, 297.5, 380.0, 482.5,
                   615.0, 785.0, 1000.0])


@pytest.fixture
def p_mfc():
    return default_params()


@pytest.fixture
def p_mfd():
    return default_params(pll_enabled=False)
