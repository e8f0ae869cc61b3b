import math

import numpy as np
import pytest

from scan_model import PolarScan


def make_scan(power, scan_index=0, range_resolution=0.05, period=0.25, t0=0.0) -> PolarScan:
    """PolarScan with evenly spaced azimuths starting at angle 0 and time t0."""
    power = np.asarray(power, dtype=np.float32)
    azimuths = power.shape[0]
    angles = np.arange(azimuths) * (2.0 * math.pi / azimuths)
    stamps = t0 + np.arange(azimuths) * (period / azimuths)
    return PolarScan(scan_index, power, angles, stamps, range_resolution)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def blank_scan():
    return make_scan(np.zeros((16, 64)))
