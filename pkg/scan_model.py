"""
Core geometric and sensor types shared by the simulator, the pipeline and the
evaluation tools, plus the on-disk scan container (binary and CSV).
"""
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Literal, Union

import numpy as np

TWO_PI = 2.0 * math.pi

SCAN_MAGIC = b"RSCN"
SCAN_VERSION = 1
# magic, version, azimuths, bins, scan_index, range_resolution
_HEADER = struct.Struct("<4sHIIqd")

MIN_AZIMUTHS = 8
MIN_BINS = 16

Frame = Literal["sensor", "world"]
PathLike = Union[str, os.PathLike]


class ScanFormatError(ValueError):
    """Raised when a scan violates the container format or the scan invariants."""

    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


def wrap_angle(angle):
    """Normalize an angle (scalar or array) to (-pi, pi]."""
    a = np.asarray(angle, dtype=np.float64)
    wrapped = a - TWO_PI * np.round(a / TWO_PI)
    wrapped = np.where(wrapped <= -math.pi, wrapped + TWO_PI, wrapped)
    wrapped = np.where(wrapped > math.pi, wrapped - TWO_PI, wrapped)
    if wrapped.ndim == 0:
        return float(wrapped)
    return wrapped


@dataclass(frozen=True)
class Pose2:
    """SE(2) transform: rotate by yaw, then translate by (x, y)."""

    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @classmethod
    def identity(cls) -> "Pose2":
        return cls(0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, values) -> "Pose2":
        x, y, yaw = (float(v) for v in values)
        return cls(x, y, yaw)

    def to_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.yaw], dtype=np.float64)

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=np.float64)

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s], [s, c]], dtype=np.float64)

    def as_matrix(self) -> np.ndarray:
        m = np.eye(3)
        m[:2, :2] = self.rotation()
        m[:2, 2] = (self.x, self.y)
        return m

    def compose(self, other: "Pose2") -> "Pose2":
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Pose2(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.yaw + other.yaw,
        )

    __matmul__ = compose

    def inverse(self) -> "Pose2":
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Pose2(-(c * self.x + s * self.y), s * self.x - c * self.y, -self.yaw)

    def between(self, other: "Pose2") -> "Pose2":
        """Relative pose of `other` expressed in this pose's frame."""
        return self.inverse().compose(other)

    def transform_xy(self, xy: np.ndarray) -> np.ndarray:
        """Apply the transform to an (N, 2) array of points."""
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        out = np.empty_like(xy)
        out[:, 0] = c * xy[:, 0] - s * xy[:, 1] + self.x
        out[:, 1] = s * xy[:, 0] + c * xy[:, 1] + self.y
        return out

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.x, self.y, self.yaw))


@dataclass(frozen=True)
class Point2:
    x: float
    y: float
    t: float = 0.0
    intensity: float = 0.0


def compose(a: Pose2, b: Pose2) -> Pose2:
    return a.compose(b)


def inverse(p: Pose2) -> Pose2:
    return p.inverse()


def transform_point(T: Pose2, p: Point2) -> Point2:
    c, s = math.cos(T.yaw), math.sin(T.yaw)
    return Point2(c * p.x - s * p.y + T.x, s * p.x + c * p.y + T.y, p.t, p.intensity)


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class FeatureCloud:
    """2-D feature points of one scan, stored column-wise."""

    scan_index: int
    xy: np.ndarray
    t: np.ndarray
    intensity: np.ndarray
    frame: Frame = "sensor"

    def __post_init__(self):
        xy = np.array(self.xy, dtype=np.float64).reshape(-1, 2)
        n = len(xy)
        t = np.array(self.t, dtype=np.float64).reshape(-1)
        intensity = np.array(self.intensity, dtype=np.float64).reshape(-1)
        if len(t) != n or len(intensity) != n:
            raise ValueError(f"cloud columns disagree: {n} points, {len(t)} stamps, {len(intensity)} intensities")
        if self.frame not in ("sensor", "world"):
            raise ValueError(f"unknown frame tag {self.frame!r}")
        if n and not np.all(np.isfinite(xy)):
            raise ValueError("cloud contains non-finite coordinates")
        object.__setattr__(self, "xy", _frozen(xy))
        object.__setattr__(self, "t", _frozen(t))
        object.__setattr__(self, "intensity", _frozen(intensity))

    @classmethod
    def empty(cls, scan_index: int, frame: Frame = "sensor") -> "FeatureCloud":
        return cls(scan_index, np.zeros((0, 2)), np.zeros(0), np.zeros(0), frame)

    @classmethod
    def from_points(cls, scan_index: int, points: Iterable[Point2], frame: Frame = "sensor") -> "FeatureCloud":
        points = list(points)
        return cls(
            scan_index,
            np.array([(p.x, p.y) for p in points], dtype=np.float64).reshape(-1, 2),
            np.array([p.t for p in points], dtype=np.float64),
            np.array([p.intensity for p in points], dtype=np.float64),
            frame,
        )

    def __len__(self) -> int:
        return len(self.xy)

    @property
    def points(self) -> List[Point2]:
        return [
            Point2(float(x), float(y), float(t), float(i))
            for (x, y), t, i in zip(self.xy, self.t, self.intensity)
        ]

    def subset(self, mask_or_index) -> "FeatureCloud":
        return FeatureCloud(
            self.scan_index,
            self.xy[mask_or_index],
            self.t[mask_or_index],
            self.intensity[mask_or_index],
            self.frame,
        )

    def with_xy(self, xy: np.ndarray, frame: Frame = None) -> "FeatureCloud":
        return FeatureCloud(self.scan_index, xy, self.t, self.intensity, frame or self.frame)

    def transformed(self, pose: Pose2, frame: Frame = "world") -> "FeatureCloud":
        return self.with_xy(pose.transform_xy(self.xy), frame)


@dataclass(frozen=True, eq=False)
class PolarScan:
    """One radar rotation: azimuth-ordered power rows with per-azimuth stamps."""

    scan_index: int
    power: np.ndarray
    azimuth_angles: np.ndarray
    azimuth_timestamps: np.ndarray
    range_resolution: float
    labels: dict = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        power = np.array(self.power, dtype=np.float32)
        angles = np.array(self.azimuth_angles, dtype=np.float64).reshape(-1)
        stamps = np.array(self.azimuth_timestamps, dtype=np.float64).reshape(-1)
        if power.ndim != 2:
            raise ScanFormatError("power", f"expected a 2-D grid, got {power.ndim} dimensions")
        azimuths, bins = power.shape
        if azimuths < MIN_AZIMUTHS:
            raise ScanFormatError("azimuths", f"{azimuths} < {MIN_AZIMUTHS}")
        if bins < MIN_BINS:
            raise ScanFormatError("bins", f"{bins} < {MIN_BINS}")
        if not (math.isfinite(self.range_resolution) and self.range_resolution > 0):
            raise ScanFormatError("range_resolution", f"must be positive, got {self.range_resolution}")
        if len(angles) != azimuths:
            raise ScanFormatError("azimuth_angles", f"{len(angles)} angles for {azimuths} azimuths")
        if len(stamps) != azimuths:
            raise ScanFormatError("azimuth_timestamps", f"{len(stamps)} stamps for {azimuths} azimuths")
        if not np.all(np.isfinite(angles)) or angles[0] < 0.0 or angles[-1] >= TWO_PI:
            raise ScanFormatError("azimuth_angles", "angles must lie in [0, 2pi)")
        if not np.all(np.diff(angles) > 0):
            raise ScanFormatError("azimuth_angles", "angles must be strictly increasing")
        if not np.all(np.isfinite(stamps)) or not np.all(np.diff(stamps) >= 0):
            raise ScanFormatError("azimuth_timestamps", "timestamps must be finite and non-decreasing")
        if not np.all((power >= 0.0) & (power <= 1.0)):
            raise ScanFormatError("power", "values must lie in [0, 1]")
        object.__setattr__(self, "scan_index", int(self.scan_index))
        object.__setattr__(self, "range_resolution", float(self.range_resolution))
        object.__setattr__(self, "power", _frozen(power))
        object.__setattr__(self, "azimuth_angles", _frozen(angles))
        object.__setattr__(self, "azimuth_timestamps", _frozen(stamps))

    @property
    def azimuths(self) -> int:
        return self.power.shape[0]

    @property
    def bins(self) -> int:
        return self.power.shape[1]

    @property
    def start_time(self) -> float:
        return float(self.azimuth_timestamps[0])

    @property
    def max_range(self) -> float:
        return self.bins * self.range_resolution

    def same_as(self, other: "PolarScan") -> bool:
        """Bit-exact comparison of every stored field."""
        return (
            self.scan_index == other.scan_index
            and self.range_resolution == other.range_resolution
            and self.power.shape == other.power.shape
            and self.power.tobytes() == other.power.tobytes()
            and self.azimuth_angles.tobytes() == other.azimuth_angles.tobytes()
            and self.azimuth_timestamps.tobytes() == other.azimuth_timestamps.tobytes()
        )


# --- Scan container IO ---

def write_scan(scan: PolarScan, path: PathLike) -> Path:
    """Write a scan; `.csv` paths get the text variant, anything else the binary container."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return _write_scan_csv(scan, path)
    header = _HEADER.pack(
        SCAN_MAGIC, SCAN_VERSION, scan.azimuths, scan.bins, scan.scan_index, scan.range_resolution
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(scan.azimuth_angles.astype("<f8").tobytes())
        f.write(scan.azimuth_timestamps.astype("<f8").tobytes())
        f.write(np.ascontiguousarray(scan.power).astype("<f4").tobytes())
    return path


def read_scan(path: PathLike) -> PolarScan:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return _read_scan_csv(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise ScanFormatError("magic", f"file too short for a header ({len(data)} bytes)")
    magic, version, azimuths, bins, scan_index, resolution = _HEADER.unpack_from(data, 0)
    if magic != SCAN_MAGIC:
        raise ScanFormatError("magic", f"expected {SCAN_MAGIC!r}, got {magic!r}")
    if version != SCAN_VERSION:
        raise ScanFormatError("version", f"unsupported version {version}")
    if azimuths < MIN_AZIMUTHS:
        raise ScanFormatError("azimuths", f"{azimuths} < {MIN_AZIMUTHS}")
    if bins < MIN_BINS:
        raise ScanFormatError("bins", f"{bins} < {MIN_BINS}")
    expected = _HEADER.size + 16 * azimuths + 4 * azimuths * bins
    if len(data) != expected:
        raise ScanFormatError("power", f"payload is {len(data)} bytes, header implies {expected}")
    offset = _HEADER.size
    angles = np.frombuffer(data, dtype="<f8", count=azimuths, offset=offset)
    offset += 8 * azimuths
    stamps = np.frombuffer(data, dtype="<f8", count=azimuths, offset=offset)
    offset += 8 * azimuths
    power = np.frombuffer(data, dtype="<f4", count=azimuths * bins, offset=offset).reshape(azimuths, bins)
    return PolarScan(scan_index, power, angles, stamps, resolution)


def _write_scan_csv(scan: PolarScan, path: Path) -> Path:
    lines = [f"{scan.azimuths},{scan.bins},{float(scan.range_resolution)!r},{scan.scan_index}"]
    for angle, stamp, row in zip(scan.azimuth_angles, scan.azimuth_timestamps, scan.power):
        values = ",".join(repr(float(v)) for v in row)
        lines.append(f"{float(angle)!r},{float(stamp)!r},{values}")
    path.write_text("\n".join(lines) + "\n")
    return path


def _read_scan_csv(path: Path) -> PolarScan:
    lines = [line for line in path.read_text().splitlines() if line.strip()]
    if not lines:
        raise ScanFormatError("header", "empty file")
    header = lines[0].split(",")
    if len(header) not in (3, 4):
        raise ScanFormatError("header", "expected 'A,B,range_resolution[,scan_index]'")
    try:
        azimuths, bins = int(header[0]), int(header[1])
        resolution = float(header[2])
        scan_index = int(header[3]) if len(header) == 4 else 0
    except ValueError as e:
        raise ScanFormatError("header", str(e)) from e
    if azimuths < MIN_AZIMUTHS:
        raise ScanFormatError("azimuths", f"{azimuths} < {MIN_AZIMUTHS}")
    if bins < MIN_BINS:
        raise ScanFormatError("bins", f"{bins} < {MIN_BINS}")
    rows = lines[1:]
    if len(rows) != azimuths:
        raise ScanFormatError("azimuths", f"header says {azimuths} rows, found {len(rows)}")
    angles = np.empty(azimuths)
    stamps = np.empty(azimuths)
    power = np.empty((azimuths, bins), dtype=np.float32)
    for a, row in enumerate(rows):
        fields = row.split(",")
        if len(fields) != bins + 2:
            raise ScanFormatError("bins", f"row {a} has {len(fields) - 2} power values, expected {bins}")
        try:
            angles[a] = float(fields[0])
            stamps[a] = float(fields[1])
            power[a] = np.array([float(v) for v in fields[2:]], dtype=np.float32)
        except ValueError as e:
            raise ScanFormatError("power", f"row {a}: {e}") from e
    return PolarScan(scan_index, power, angles, stamps, resolution)


def scan_filename(scan_index: int, suffix: str = ".rscan") -> str:
    return f"scan_{scan_index:06d}{suffix}"


def list_scans(directory: PathLike) -> List[Path]:
    """Scan files of a directory in scan order (binary containers first, CSV otherwise)."""
    directory = Path(directory)
    if not directory.is_dir():
        return []
    binary = sorted(directory.glob("scan_*.rscan"))
    return binary if binary else sorted(directory.glob("scan_*.csv"))
