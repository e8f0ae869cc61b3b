import pytest

from cli import build_parser, main
from evaluation import read_trajectory


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    import os

    for var in list(os.environ):
        if var.startswith("MMSLAM_"):
            monkeypatch.delenv(var)


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--fixture", "stationary", "--scans", "6", "--preset", "desk", "--out", str(out)]) == 0
    return out


def test_simulate_writes_a_sequence(sim_dir):
    assert len(list(sim_dir.glob("scan_*.rscan"))) == 6
    assert len(read_trajectory(sim_dir / "groundtruth.csv")) == 6
    assert (sim_dir / "world.csv").exists()


def test_run_then_evaluate(sim_dir, tmp_path, capsys):
    run_dir = tmp_path / "run"
    assert main(["run", str(sim_dir), "--out", str(run_dir), "--single-thread"]) == 0
    assert (run_dir / "odometry.csv").exists()
    assert main(["evaluate", str(run_dir), str(sim_dir / "groundtruth.csv")]) == 0
    out = capsys.readouterr().out
    assert "ATE" in out
    assert (run_dir / "report.csv").exists()


def test_empty_input_exits_with_one(tmp_path, capsys):
    assert main(["run", str(tmp_path / "empty"), "--out", str(tmp_path / "out")]) == 1
    assert "❌" in capsys.readouterr().out


@pytest.mark.parametrize(
    "extra",
    [
        ["--set", "icp.nope=1"],
        ["--set", "icp.huber_delta=-1"],
        ["--set", "no_equals_sign"],
        ["--matching", "scan_to_nowhere"],
    ],
)
def test_invalid_config_exits_with_two(sim_dir, tmp_path, extra, capsys):
    assert main(["run", str(sim_dir), "--out", str(tmp_path / "out"), *extra]) == 2
    assert "invalid config" in capsys.readouterr().out


def test_missing_config_file_exits_with_two(sim_dir, tmp_path):
    assert main(["run", str(sim_dir), "--config", str(tmp_path / "absent.env")]) == 2


def test_evaluate_without_trajectories(tmp_path, sim_dir):
    assert main(["evaluate", str(tmp_path), str(sim_dir / "groundtruth.csv")]) == 1


def test_frames_matching_flag():
    args = build_parser().parse_args(["run", "scans", "--matching", "scan_to_frames(4)", "--seed", "9"])
    assert args.matching == "scan_to_frames(4)"
    assert args.seed == 9
