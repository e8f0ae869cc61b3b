import csv
import filecmp
import math

import numpy as np
import pytest

import simulator
from config import load_config
from conftest import make_scan
from evaluation import ate_rmse, read_trajectory
from loop_closure import BackendUpdate
from pipeline import (
    FrameWindow,
    PipelineError,
    PipelineState,
    ablate,
    ablation_variants,
    adopt_updates,
    process_scan,
    run,
)
from scan_model import FeatureCloud, Pose2
from simulator import ArtifactConfig, ScanParams

PARAMS = ScanParams(azimuths=400, bins=400, range_resolution=0.05, scan_period=0.25)
OUTPUTS = ["odometry.csv", "corrected.csv", "map.csv", "timing.csv", "loop_events.csv",
           "graph_nodes.csv", "graph_edges.csv", "config.resolved.env"]


def timing_column(run_dir, name):
    with open(run_dir / "timing.csv", newline="") as f:
        return [float(row[name]) for row in csv.DictReader(f)]


@pytest.fixture(scope="module")
def still_scans(tmp_path_factory):
    out = tmp_path_factory.mktemp("still")
    simulator.generate_sequence(simulator.room(), simulator.stationary_script(), 101, PARAMS, out)
    return out


@pytest.fixture(scope="module")
def moving_scans(tmp_path_factory):
    out = tmp_path_factory.mktemp("moving")
    script = simulator.straight_script(speed=0.5, duration=6.0, start=Pose2(-4.0, 0.0, 0.0))
    artifacts = ArtifactConfig(speckle_prob=0.002, ghost_prob=0.05, noise_seed=7)
    simulator.generate_sequence(simulator.room(), script, 16, PARAMS, out, artifacts)
    return out


@pytest.fixture(scope="module")
def fast_scans(tmp_path_factory):
    out = tmp_path_factory.mktemp("fast")
    script = simulator.straight_script(speed=1.0, duration=14.0, start=Pose2(-6.5, 0.0, 0.0))
    simulator.generate_sequence(simulator.room(), script, 52, PARAMS, out)
    return out


@pytest.fixture(scope="module")
def loop_scans(tmp_path_factory):
    out = tmp_path_factory.mktemp("loop")
    simulator.generate_sequence(simulator.hall(), simulator.square_loop_script(), 350,
                                ScanParams(azimuths=400, bins=1000), out,
                                ArtifactConfig(speckle_prob=0.001, ghost_prob=0.05, noise_seed=1))
    return out


@pytest.fixture
def cfg():
    return load_config(overrides={"loop.min_separation": "5"}, use_env=False)


def test_empty_input_is_an_error(tmp_path, cfg):
    with pytest.raises(PipelineError):
        run(cfg, tmp_path / "nothing", tmp_path / "out")


def test_stationary_sequence_stays_put(still_scans, tmp_path, cfg):
    messages = []
    summary = run(cfg, still_scans, tmp_path / "out", progress_callback=messages.append, max_scans=50)
    assert summary.scans == 50
    assert summary.fallbacks == 0
    for name in OUTPUTS:
        assert (tmp_path / "out" / name).exists(), name
    for pose in read_trajectory(summary.odometry_path).poses:
        assert math.hypot(pose.x, pose.y) < 0.02
        assert abs(pose.yaw) < 0.005
    assert any(m.startswith("✅") for m in messages)


def test_resolved_config_reloads(still_scans, tmp_path, cfg):
    run(cfg, still_scans, tmp_path / "out", max_scans=3)
    assert load_config(tmp_path / "out" / "config.resolved.env", use_env=False) == cfg


def test_max_scans(still_scans, tmp_path, cfg):
    summary = run(cfg, still_scans, tmp_path / "out", max_scans=4)
    assert summary.scans == 4
    assert timing_column(tmp_path / "out", "scan_index") == [0, 1, 2, 3]


def test_tracks_a_straight_drive(moving_scans, tmp_path, cfg):
    summary = run(cfg, moving_scans, tmp_path / "out")
    odometry = read_trajectory(summary.odometry_path)
    gt = read_trajectory(moving_scans / "groundtruth.csv")
    truth = gt.poses[0].between(gt.poses[-1])
    last = odometry.poses[0].between(odometry.poses[-1])
    assert abs(last.x - truth.x) < 0.25
    assert abs(last.y) < 0.1
    assert ate_rmse(odometry, gt) < 0.2


def test_per_scan_steps_at_one_meter_per_second(fast_scans, tmp_path):
    cfg = load_config(overrides={"pipeline.loop_enabled": "false"}, use_env=False)
    summary = run(cfg, fast_scans, tmp_path / "out")
    poses = read_trajectory(summary.odometry_path).poses
    assert len(poses) == 52
    steps = [math.hypot(b.x - a.x, b.y - a.y) for a, b in zip(poses, poses[1:])]
    assert all(abs(step - 0.25) <= 0.02 for step in steps), steps


def test_single_thread_and_concurrent_runs_match(moving_scans, tmp_path, cfg):
    run(cfg, moving_scans, tmp_path / "a", single_thread=True)
    run(cfg, moving_scans, tmp_path / "b", single_thread=True)
    run(cfg, moving_scans, tmp_path / "c", single_thread=False)
    for name in OUTPUTS:
        assert filecmp.cmp(tmp_path / "a" / name, tmp_path / "b" / name, shallow=False), name
        assert filecmp.cmp(tmp_path / "a" / name, tmp_path / "c" / name, shallow=False), name


def test_scan_to_frames_matching(still_scans, tmp_path):
    cfg = load_config(overrides={"pipeline.matching": "scan_to_frames(3)"}, use_env=False)
    summary = run(cfg, still_scans, tmp_path / "out", max_scans=6)
    assert summary.map_size > 0
    with open(tmp_path / "out" / "map.csv", newline="") as f:
        births = {int(r["birth_scan"]) for r in csv.DictReader(f)}
    assert births == {3, 4, 5}


def test_without_loop_closure(still_scans, tmp_path):
    cfg = load_config(overrides={"pipeline.loop_enabled": "false"}, use_env=False)
    summary = run(cfg, still_scans, tmp_path / "out", max_scans=3)
    assert summary.corrected_path is None
    assert not (tmp_path / "out" / "corrected.csv").exists()


def test_map_only_grows_without_the_probability_filter(moving_scans, tmp_path):
    cfg = load_config(overrides={"pipeline.probability_filter_enabled": "false", "pipeline.loop_enabled": "false"},
                      use_env=False)
    run(cfg, moving_scans, tmp_path / "out")
    sizes = timing_column(tmp_path / "out", "map_size")
    assert all(b >= a for a, b in zip(sizes, sizes[1:]))
    assert sizes[-1] > sizes[0]


@pytest.mark.slow
def test_map_size_plateaus_when_stationary(still_scans, tmp_path):
    cfg = load_config(overrides={"pipeline.loop_enabled": "false"}, use_env=False)
    run(cfg, still_scans, tmp_path / "out")
    sizes = timing_column(tmp_path / "out", "map_size")
    assert len(sizes) == 101
    assert abs(sizes[100] - sizes[50]) <= 0.1 * sizes[50]


def test_scans_must_arrive_in_order(cfg):
    state = PipelineState.create(cfg)
    with pytest.raises(ValueError):
        process_scan(state, make_scan(np.zeros((16, 64)), scan_index=3))


def test_state_exposes_the_back_end_graph(cfg):
    state = PipelineState.create(cfg)
    assert state.graph is state.backend.backend.graph
    assert PipelineState.create(cfg.model_copy(update={"loop_enabled": False})).graph is None


def test_adopted_correction_moves_later_scans(cfg):
    state = PipelineState.create(cfg)
    state.trajectory = {0: Pose2(), 1: Pose2(1.0, 0.0, 0.0), 2: Pose2(2.0, 0.0, 0.0)}
    state.corrected = dict(state.trajectory)
    adopt_updates(state, [BackendUpdate(1, (), 1, {0: Pose2(), 1: Pose2(1.0, 0.5, 0.0)})])
    assert state.loops_adopted == 1
    assert state.corrected[1] == Pose2(1.0, 0.5, 0.0)
    assert state.corrected[2].x == pytest.approx(2.0)
    assert state.corrected[2].y == pytest.approx(0.5)
    assert state.trajectory[2] == Pose2(2.0, 0.0, 0.0)
    assert state.correction.compose(Pose2(3.0, 0.0, 0.0)).y == pytest.approx(0.5)


def test_updates_without_poses_only_count_loops(cfg):
    state = PipelineState.create(cfg)
    state.trajectory = {0: Pose2()}
    adopt_updates(state, [BackendUpdate(0, (), 0, None)])
    assert state.correction == Pose2()
    assert state.corrected == {}


def test_frame_window_keeps_the_latest_clouds():
    window = FrameWindow(2)
    for k in range(4):
        window.push(FeatureCloud(k, [[float(k), 0.0], [float(k), 1.0]], [0.0, 0.0], [1.0, 1.0], "world"))
    assert [c.scan_index for c in window.clouds] == [2, 3]
    assert len(window) == 4


def test_ablation_variants(cfg):
    variants = ablation_variants(cfg, frames=5)
    assert list(variants) == ["full", "no_probability_filter", "no_geometry_filter", "scan_to_frames(5)", "no_loop"]
    assert variants["scan_to_frames(5)"].matching_label == "scan_to_frames(5)"
    assert not variants["no_loop"].loop_enabled


@pytest.mark.slow
def test_throughput_on_full_size_scans(tmp_path):
    data = tmp_path / "gallery"
    script = simulator.straight_script(speed=1.0, duration=12.0, start=Pose2(-30.0, 0.0, 0.0))
    simulator.generate_sequence(simulator.gallery(), script, 40, ScanParams(azimuths=400, bins=1000), data)
    summary = run(load_config(use_env=False), data, tmp_path / "out")
    assert summary.scans / summary.seconds >= 4.0


@pytest.mark.slow
def test_square_loop_end_to_end(loop_scans, tmp_path):
    summary = run(load_config(use_env=False), loop_scans, tmp_path / "out")
    gt = read_trajectory(loop_scans / "groundtruth.csv")
    odometry = ate_rmse(read_trajectory(summary.odometry_path), gt)
    corrected = ate_rmse(read_trajectory(summary.corrected_path), gt)
    assert summary.scans == 350
    assert summary.loops > 0
    assert corrected <= 0.8 * odometry


@pytest.mark.slow
def test_ablation_drift_ordering(loop_scans, tmp_path):
    rows = ablate(load_config(use_env=False), loop_scans, loop_scans / "groundtruth.csv", tmp_path / "ablation")
    drift = {row["variant"]: row["trans_pct"] for row in rows if row["trajectory"] == "odometry"}
    assert drift["full"] is not None
    assert drift["full"] <= drift["no_probability_filter"]
    assert drift["full"] <= drift["no_geometry_filter"]
    assert (tmp_path / "ablation" / "ablation.csv").exists()
