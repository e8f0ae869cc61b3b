"""
Pipeline configuration: pydantic models for every stage, loaded from a
dotenv-format file of `namespace.key=value` lines with MMSLAM_* environment
overrides, plus the sensor presets.
"""
import os
import re
from pathlib import Path
from typing import Dict, Literal, Optional

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, Field, model_validator

from feature_detector import DetectorConfig
from feature_map import FilterConfig
from geometry_filter import GeometryConfig
from loop_closure import LoopConfig
from motion_model import MotionConfig
from registration import RegistrationConfig
from simulator import ScanParams

load_dotenv()

ENV_PREFIX = "MMSLAM_"
_FRAMES_MODE = re.compile(r"^\s*scan_to_frames\s*\(\s*(\d+)\s*\)\s*$")


class ConfigError(ValueError):
    """Raised for malformed config files or unknown keys."""


class PipelineConfig(BaseModel):
    detector: DetectorConfig = Field(default_factory=DetectorConfig)
    geometry: GeometryConfig = Field(default_factory=GeometryConfig)
    motion: MotionConfig = Field(default_factory=MotionConfig)
    icp: RegistrationConfig = Field(default_factory=RegistrationConfig)
    pfilter: FilterConfig = Field(default_factory=FilterConfig)
    loop: LoopConfig = Field(default_factory=LoopConfig)

    matching: Literal["scan_to_map", "scan_to_frames"] = Field("scan_to_map", description="Local map used for registration")
    frames: int = Field(9, ge=1, description="Frames in the local map when matching scan_to_frames")
    geometry_filter_enabled: bool = Field(True, description="Keep only surface features")
    probability_filter_enabled: bool = Field(True, description="Evict low hit-probability map points")
    loop_enabled: bool = Field(True, description="Run loop detection and pose-graph optimization")
    record_wallclock: bool = Field(False, description="Add wall-clock columns to timing.csv")
    preset: str = Field("desk", description="Sensor preset name")
    seed: int = Field(0, ge=0, description="Seed recorded with the run and used by the simulator")

    @model_validator(mode="before")
    @classmethod
    def _parse_frames_mode(cls, data):
        if isinstance(data, dict):
            found = _FRAMES_MODE.match(str(data.get("matching", "")))
            if found:
                data = {**data, "matching": "scan_to_frames", "frames": int(found.group(1))}
        return data

    @property
    def matching_label(self) -> str:
        return f"scan_to_frames({self.frames})" if self.matching == "scan_to_frames" else self.matching


NAMESPACES = {
    "detector": DetectorConfig,
    "geometry": GeometryConfig,
    "motion": MotionConfig,
    "icp": RegistrationConfig,
    "pfilter": FilterConfig,
    "loop": LoopConfig,
    "pipeline": PipelineConfig,
}
_PIPELINE_KEYS = [name for name in PipelineConfig.model_fields if name not in NAMESPACES]

PRESETS: Dict[str, dict] = {
    "desk": {
        "scan": ScanParams(azimuths=400, bins=1000, range_resolution=0.05, scan_period=0.25),
        "overrides": {},
    },
    "navtech_cts350x": {
        "scan": ScanParams(azimuths=400, bins=3768, range_resolution=0.0432, scan_period=0.25),
        "overrides": {},
    },
    "navtech_cir204h": {
        "scan": ScanParams(azimuths=400, bins=3360, range_resolution=0.0596, scan_period=0.25),
        "overrides": {"pfilter.theta_p": "0.2"},
    },
}


def preset_scan_params(name: str) -> ScanParams:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}")
    return PRESETS[name]["scan"]


def _split_key(key: str):
    if "." not in key:
        raise ConfigError(f"config key {key!r} must look like namespace.key")
    namespace, name = key.split(".", 1)
    namespace, name = namespace.strip().lower(), name.strip().lower()
    if namespace not in NAMESPACES:
        raise ConfigError(f"unknown namespace {namespace!r} in {key!r}")
    valid = _PIPELINE_KEYS if namespace == "pipeline" else list(NAMESPACES[namespace].model_fields)
    if name not in valid:
        raise ConfigError(f"unknown key {name!r} in namespace {namespace!r}")
    return namespace, name


def _coerce(value: str):
    value = value.strip()
    if "," in value:
        return [part.strip() for part in value.split(",")]
    return value


def env_overrides(environ=None) -> Dict[str, str]:
    """MMSLAM_<NAMESPACE>__<KEY> variables as namespace.key entries."""
    environ = os.environ if environ is None else environ
    found = {}
    for var, value in environ.items():
        if not var.startswith(ENV_PREFIX) or "__" not in var:
            continue
        namespace, name = var[len(ENV_PREFIX):].split("__", 1)
        found[f"{namespace.lower()}.{name.lower()}"] = value
    return found


def build_config(entries: Dict[str, str]) -> PipelineConfig:
    """Assemble a PipelineConfig from flat namespace.key entries."""
    nested: Dict[str, dict] = {ns: {} for ns in NAMESPACES}
    for key, value in entries.items():
        if value is None:
            raise ConfigError(f"config key {key!r} has no value")
        namespace, name = _split_key(key)
        nested[namespace][name] = _coerce(str(value))
    data = dict(nested.pop("pipeline"))
    data.update({ns: values for ns, values in nested.items() if values})
    return PipelineConfig.model_validate(data)


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, str]] = None,
                use_env: bool = True) -> PipelineConfig:
    """
    Defaults < preset < config file < MMSLAM_* environment < explicit overrides.

    Raises ConfigError for unreadable files or unknown keys and
    pydantic.ValidationError for out-of-range values.
    """
    entries: Dict[str, str] = {}
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"config file not found: {path}")
        entries.update({k: v for k, v in dotenv_values(path).items()})
    if use_env:
        entries.update(env_overrides())
    entries.update(overrides or {})

    preset = entries.get("pipeline.preset", PipelineConfig.model_fields["preset"].default)
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(sorted(PRESETS))}")
    merged = dict(PRESETS[preset]["overrides"])
    merged.update(entries)
    return build_config(merged)


def config_entries(cfg: PipelineConfig) -> Dict[str, str]:
    entries = {}
    for namespace in NAMESPACES:
        if namespace == "pipeline":
            values = {name: getattr(cfg, name) for name in _PIPELINE_KEYS}
        else:
            values = getattr(cfg, namespace).model_dump()
        for name, value in values.items():
            entries[f"{namespace}.{name}"] = _format(value)
    return entries


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_config(cfg: PipelineConfig, path) -> Path:
    path = Path(path)
    lines = [f"{key}={value}" for key, value in config_entries(cfg).items()]
    path.write_text("\n".join(lines) + "\n")
    return path
