import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

import simulator
from evaluation import read_trajectory
from scan_model import Pose2, list_scans, read_scan
from simulator import (
    ArtifactConfig,
    ScanParams,
    TrajectoryScript,
    World,
    cast_rays,
    generate_sequence,
    read_script,
    read_world,
    render_scan,
    sample_world_points,
    write_script,
    write_world,
)

PARAMS = ScanParams(azimuths=64, bins=256, range_resolution=0.05, scan_period=0.25)


@pytest.fixture
def wall():
    # vertical wall 5.02 m ahead; keeps r / res away from a .5 rounding tie on azimuth 0
    return World.from_segments([(5.02, -20.0, 5.02, 20.0)], reflectivity=0.9)


@pytest.fixture
def still():
    return simulator.stationary_script(duration=10.0)


# ---------------------------------------------------------------------------
# Geometry and pulses
# ---------------------------------------------------------------------------

def test_cast_rays_hits_the_nearest_segment():
    world = World.from_segments([(3.0, -1.0, 3.0, 1.0), (6.0, -1.0, 6.0, 1.0)])
    ranges, segment = cast_rays(world, np.zeros((3, 2)), np.array([0.0, math.pi, math.pi / 2]), 100.0)
    assert ranges[0] == pytest.approx(3.0)
    assert segment.tolist() == [0, -1, -1]
    assert np.isinf(ranges[1:]).all()


def test_pulse_peaks_at_the_hit_bin(wall, still):
    scan = render_scan(wall, still, 0.0, PARAMS)
    hit = scan.labels["hit_bin"]
    assert hit[0] == 100
    rows = np.flatnonzero(hit >= 0)
    assert len(rows) > 0
    assert_array_equal(np.argmax(scan.power[rows], axis=1), hit[rows])
    expected = np.rint(scan.labels["hit_range"][rows] / PARAMS.range_resolution - 0.5).astype(int)
    assert_array_equal(hit[rows], expected)
    assert scan.power[0, 100] == pytest.approx(0.9, abs=1e-6)


def test_pulse_is_truncated(wall, still):
    row = render_scan(wall, still, 0.0, PARAMS).power[0]
    assert row[100 + 13] == 0.0 and row[100 - 13] == 0.0
    assert row[100 + 12] > 0.0


def test_stamps_and_angles(wall, still):
    scan = render_scan(wall, still, 2.0, PARAMS, scan_index=8)
    assert scan.scan_index == 8
    assert_allclose(scan.azimuth_timestamps, 2.0 + np.arange(64) * 0.25 / 64)
    assert_allclose(scan.azimuth_angles, np.arange(64) * 2 * math.pi / 64)


def test_motion_during_a_rotation_is_rendered():
    script = simulator.straight_script(speed=4.0, duration=5.0)
    scan = render_scan(World.from_segments([(5.02, -20.0, 5.02, 20.0)]), script, 1.0, PARAMS)
    poses = scan.labels["poses"]
    assert poses[0][0] == pytest.approx(4.0)
    assert poses[-1][0] == pytest.approx(4.0 + 4.0 * 0.25 * 63 / 64)


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------

class TestArtifacts:
    def test_ghost_at_doubled_range(self, still):
        world = World.from_segments([(3.02, -20.0, 3.02, 20.0)], reflectivity=0.8)
        scan = render_scan(world, still, 0.0, PARAMS, ArtifactConfig(ghost_prob=1.0))
        hit, ghost = scan.labels["hit_bin"][0], scan.labels["ghost_bin"][0]
        assert ghost == 2 * hit + 1
        assert scan.power[0, ghost] == pytest.approx(0.4, abs=1e-6)

    def test_saturated_runs(self, wall, still):
        scan = render_scan(wall, still, 0.0, PARAMS, ArtifactConfig(saturation_prob=1.0, saturation_bins=20))
        for a, (start, stop) in enumerate(scan.labels["saturation"]):
            assert stop - start == 20
            assert (scan.power[a, start:stop] == 1.0).all()

    def test_speckle_cells(self, wall, still):
        scan = render_scan(wall, still, 0.0, PARAMS, ArtifactConfig(speckle_prob=0.01, noise_seed=3))
        cells = scan.labels["speckle"]
        assert 0 < len(cells) < 0.05 * 64 * 256
        assert (scan.power[cells[:, 0], cells[:, 1]] >= 0.3 - 1e-6).all()

    def test_same_seed_same_scan(self, wall, still):
        artifacts = ArtifactConfig(speckle_prob=0.01, ghost_prob=0.5, saturation_prob=0.1, noise_seed=11)
        a = render_scan(wall, still, 0.0, PARAMS, artifacts, scan_index=4)
        b = render_scan(wall, still, 0.0, PARAMS, artifacts, scan_index=4)
        assert a.power.tobytes() == b.power.tobytes()
        c = render_scan(wall, still, 0.0, PARAMS, artifacts.model_copy(update={"noise_seed": 12}), scan_index=4)
        assert a.power.tobytes() != c.power.tobytes()

    def test_invalid_speckle_intensity(self):
        with pytest.raises(ValueError):
            ArtifactConfig(speckle_intensity=(0.8, 0.2))


# ---------------------------------------------------------------------------
# Scripts
# ---------------------------------------------------------------------------

class TestScripts:
    def test_interpolates_the_short_way_round(self):
        script = TrajectoryScript(np.array([0.0, 1.0]), (Pose2(0, 0, 3.0), Pose2(2, 0, -3.0)))
        mid = script.pose_at(0.5)
        assert mid.x == pytest.approx(1.0)
        assert abs(mid.yaw) == pytest.approx(math.pi, abs=1e-9)

    def test_outside_the_window(self):
        with pytest.raises(ValueError):
            simulator.stationary_script(duration=5.0).pose_at(6.0)

    def test_square_loop_returns_home(self):
        script = simulator.square_loop_script()
        assert script.end == pytest.approx(88.0)
        assert_allclose(script.waypoints[-1].to_array(), script.waypoints[0].to_array(), atol=1e-9)

    def test_times_must_increase(self):
        with pytest.raises(ValueError):
            TrajectoryScript(np.array([0.0, 0.0]), (Pose2(), Pose2()))

    def test_script_file_round_trip(self, tmp_path):
        script = simulator.square_loop_script()
        back = read_script(write_script(script, tmp_path / "script.csv"))
        assert_array_equal(back.times, script.times)
        assert back.waypoints == script.waypoints


# ---------------------------------------------------------------------------
# Sequences and files
# ---------------------------------------------------------------------------

def test_generate_sequence(tmp_path, wall):
    script = simulator.straight_script(speed=1.0, duration=3.0)
    artifacts = ArtifactConfig(speckle_prob=0.002, noise_seed=5)
    paths, gt_path = generate_sequence(wall, script, 6, PARAMS, tmp_path, artifacts)
    assert [p.name for p in paths] == [p.name for p in list_scans(tmp_path)]
    gt = read_trajectory(gt_path)
    assert list(gt.indices) == list(range(6))
    assert gt.poses[4].x == pytest.approx(1.0)
    alone = render_scan(wall, script, 0.75, PARAMS, artifacts, scan_index=3)
    assert read_scan(paths[3]).same_as(alone)
    assert read_world(tmp_path / "world.csv").segments.tolist() == wall.segments.tolist()


def test_script_too_short_for_the_sequence(tmp_path, wall):
    with pytest.raises(ValueError):
        generate_sequence(wall, simulator.straight_script(duration=1.0), 6, PARAMS, tmp_path)


def test_csv_sequences(tmp_path, wall, still):
    paths, _ = generate_sequence(wall, still, 2, PARAMS, tmp_path, suffix=".csv")
    assert all(p.suffix == ".csv" for p in paths)
    assert read_scan(paths[1]).scan_index == 1


def test_world_file_round_trip(tmp_path):
    world = simulator.room()
    back = read_world(write_world(world, tmp_path / "world.csv"))
    assert_array_equal(back.segments, world.segments)
    assert_array_equal(back.reflectivity, world.reflectivity)


def test_sample_world_points_lie_on_segments():
    pts = sample_world_points(World.from_segments([(0.0, 0.0, 4.0, 0.0)]), spacing=0.5)
    assert len(pts) == 9
    assert_allclose(pts[:, 1], 0.0)


@pytest.mark.parametrize("fixture", ["two_walls", "room", "corridor", "gallery", "hall"])
def test_fixture_worlds_are_valid(fixture):
    world = getattr(simulator, fixture)()
    assert len(world.segments) >= 2
    assert (world.reflectivity > 0).all()
