import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from conftest import make_scan
from feature_detector import DetectorConfig, detect, run_mask


RES = 0.05


def scan_with_runs(runs, azimuths=16, bins=64):
    """runs: (azimuth, first_bin, last_bin, power) with inclusive bin bounds."""
    power = np.zeros((azimuths, bins))
    for a, lo, hi, value in runs:
        power[a, lo: hi + 1] = value
    return make_scan(power, range_resolution=RES)


def test_blank_scan_has_no_features(blank_scan):
    cloud = detect(blank_scan)
    assert len(cloud) == 0
    assert cloud.frame == "sensor"


def test_flat_run_yields_its_midpoint():
    cloud = detect(scan_with_runs([(0, 10, 14, 0.8)]))
    assert len(cloud) == 1
    assert_allclose(cloud.xy[0], [12.5 * RES, 0.0], atol=1e-12)
    assert cloud.t[0] == 0.0
    assert cloud.intensity[0] == pytest.approx(0.8)


def test_falling_edge_fails_the_gradient_test():
    mask = run_mask(scan_with_runs([(0, 10, 14, 0.8)]).power, DetectorConfig())
    assert_array_equal(np.flatnonzero(mask[0]), [10, 11, 12, 13])


def test_point_uses_azimuth_angle_and_stamp():
    scan = scan_with_runs([(4, 20, 24, 0.7)])
    cloud = detect(scan)
    r = 22.5 * RES
    assert_allclose(cloud.xy[0], [r * math.cos(math.pi / 2), r * math.sin(math.pi / 2)], atol=1e-12)
    assert cloud.t[0] == scan.azimuth_timestamps[4]


def test_strongest_run_wins_when_capped():
    scan = scan_with_runs([(3, 10, 14, 0.6), (3, 30, 34, 0.9)])
    cloud = detect(scan, DetectorConfig(max_features_per_azimuth=1))
    assert len(cloud) == 1
    r = np.hypot(*cloud.xy[0])
    assert r == pytest.approx(32.5 * RES)


def test_equal_peaks_keep_the_nearer_run():
    scan = scan_with_runs([(3, 30, 34, 0.8), (3, 10, 14, 0.8)])
    cloud = detect(scan, DetectorConfig(max_features_per_azimuth=1))
    assert np.hypot(*cloud.xy[0]) == pytest.approx(12.5 * RES)


def test_short_runs_are_dropped():
    scan = scan_with_runs([(0, 10, 14, 0.8)])
    assert len(detect(scan, DetectorConfig(min_run_bins=5))) == 0
    assert len(detect(scan, DetectorConfig(min_run_bins=4))) == 1


def test_output_is_ordered_by_azimuth_then_range():
    scan = scan_with_runs([(5, 40, 44, 0.9), (1, 30, 34, 0.9), (1, 10, 14, 0.5)])
    cloud = detect(scan)
    assert_array_equal(np.argsort(cloud.t, kind="stable"), np.arange(3))
    assert np.hypot(*cloud.xy[0]) < np.hypot(*cloud.xy[1])


class TestProperties:
    @pytest.fixture
    def noisy_scan(self, rng):
        # smooth random rows so that runs actually form
        raw = rng.uniform(0, 1, size=(32, 256))
        kernel = np.ones(9) / 9
        smooth = np.array([np.convolve(row, kernel, mode="same") for row in raw])
        return make_scan(np.clip(smooth * 1.4 - 0.2, 0, 1), range_resolution=RES)

    def test_count_and_range_bounds(self, noisy_scan):
        cfg = DetectorConfig(intensity_threshold=0.5, max_features_per_azimuth=3)
        cloud = detect(noisy_scan, cfg)
        assert len(cloud) <= noisy_scan.azimuths * cfg.max_features_per_azimuth
        r = np.hypot(cloud.xy[:, 0], cloud.xy[:, 1])
        assert np.all(r > 0) and np.all(r <= noisy_scan.max_range + 1e-9)

    def test_deterministic(self, noisy_scan):
        a, b = detect(noisy_scan), detect(noisy_scan)
        assert a.xy.tobytes() == b.xy.tobytes()
        assert a.intensity.tobytes() == b.intensity.tobytes()

    def test_raising_the_threshold_never_adds_points(self):
        scan = scan_with_runs([(a, 5 + 3 * a, 9 + 3 * a, 0.1 + 0.06 * a) for a in range(16)])
        counts = [
            len(detect(scan, DetectorConfig(intensity_threshold=th)))
            for th in (0.2, 0.35, 0.5, 0.65, 0.8)
        ]
        assert counts == sorted(counts, reverse=True)
        assert counts[0] > counts[-1]
