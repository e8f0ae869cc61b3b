import pytest
from pydantic import ValidationError

from config import (
    ConfigError,
    PipelineConfig,
    build_config,
    env_overrides,
    load_config,
    preset_scan_params,
    write_config,
)


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    import os

    for var in list(os.environ):
        if var.startswith("MMSLAM_"):
            monkeypatch.delenv(var)


def test_defaults():
    cfg = load_config()
    assert cfg == PipelineConfig()
    assert cfg.matching_label == "scan_to_map"
    assert cfg.pfilter.theta_p == 0.25
    assert cfg.loop.n_ring == 20 and cfg.loop.n_sector == 60


def test_file_round_trip(tmp_path):
    cfg = build_config({
        "icp.huber_delta": "0.5",
        "pfilter.hit_counting": "indicator",
        "loop.loop_sigmas": "0.2,0.2,0.02",
        "pipeline.loop_enabled": "false",
    })
    assert cfg.loop.loop_sigmas == (0.2, 0.2, 0.02)
    assert cfg.loop_enabled is False
    assert load_config(write_config(cfg, tmp_path / "run.env")) == cfg


def test_frames_matching_syntax():
    cfg = load_config(overrides={"pipeline.matching": "scan_to_frames(5)"})
    assert cfg.matching == "scan_to_frames"
    assert cfg.frames == 5
    assert cfg.matching_label == "scan_to_frames(5)"


@pytest.mark.parametrize("key", ["icp.nope", "radar.huber_delta", "huber_delta", "pipeline.detector"])
def test_unknown_keys(key):
    with pytest.raises(ConfigError):
        build_config({key: "1"})


def test_out_of_range_value():
    with pytest.raises(ValidationError):
        build_config({"geometry.theta_min": "1.5"})


def test_bad_matching_mode():
    with pytest.raises(ValidationError):
        build_config({"pipeline.matching": "scan_to_nowhere"})


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.env")


def test_env_overrides_are_namespaced():
    found = env_overrides({"MMSLAM_ICP__HUBER_DELTA": "0.5", "MMSLAM_SEED": "3", "PATH": "/bin"})
    assert found == {"icp.huber_delta": "0.5"}


def test_precedence(tmp_path, monkeypatch):
    path = tmp_path / "run.env"
    path.write_text("icp.huber_delta=0.2\ndetector.min_run_bins=3\n")
    monkeypatch.setenv("MMSLAM_ICP__HUBER_DELTA", "0.3")

    assert load_config(path, use_env=False).icp.huber_delta == 0.2
    assert load_config(path).icp.huber_delta == 0.3
    cfg = load_config(path, overrides={"icp.huber_delta": "0.4"})
    assert cfg.icp.huber_delta == 0.4
    assert cfg.detector.min_run_bins == 3


class TestPresets:
    def test_preset_overrides_apply(self):
        cfg = load_config(overrides={"pipeline.preset": "navtech_cir204h"})
        assert cfg.pfilter.theta_p == 0.2

    def test_explicit_keys_beat_the_preset(self):
        cfg = load_config(overrides={"pipeline.preset": "navtech_cir204h", "pfilter.theta_p": "0.3"})
        assert cfg.pfilter.theta_p == 0.3

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            load_config(overrides={"pipeline.preset": "lidar"})
        with pytest.raises(ConfigError):
            preset_scan_params("lidar")

    def test_scan_geometry(self):
        params = preset_scan_params("navtech_cts350x")
        assert params.azimuths == 400
        assert params.max_range == pytest.approx(3768 * 0.0432)
