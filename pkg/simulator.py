"""
Deterministic synthetic radar world: renders polar power scans of a 2-D
line-segment map along a scripted trajectory, with optional speckle, multipath
ghosts and saturated runs. Used as the ground-truth oracle for end-to-end tests.
"""
import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from evaluation import write_trajectory
from scan_model import PolarScan, Pose2, scan_filename, wrap_angle, write_scan


class ScanParams(BaseModel):
    azimuths: int = Field(400, ge=8, description="Azimuth rows per rotation")
    bins: int = Field(1000, ge=16, description="Range bins per azimuth")
    range_resolution: float = Field(0.05, gt=0.0, description="Meters per range bin")
    scan_period: float = Field(0.25, gt=0.0, description="Seconds per rotation")
    pulse_sigma_bins: float = Field(3.0, gt=0.0, description="Standard deviation of a return pulse in bins")

    @property
    def max_range(self) -> float:
        return self.bins * self.range_resolution


class ArtifactConfig(BaseModel):
    speckle_prob: float = Field(0.0, ge=0.0, le=1.0, description="Per-cell probability of a speckle return")
    speckle_intensity: Tuple[float, float] = Field((0.3, 1.0), description="Uniform range of speckle power")
    ghost_prob: float = Field(0.0, ge=0.0, le=1.0, description="Per-return probability of a ghost at doubled range")
    saturation_prob: float = Field(0.0, ge=0.0, le=1.0, description="Per-azimuth probability of a saturated run")
    saturation_bins: int = Field(30, ge=1, description="Length of a saturated run in bins")
    noise_seed: int = Field(0, ge=0, description="Seed of the counter-based noise source")

    @model_validator(mode="after")
    def _check_intensity(self):
        lo, hi = self.speckle_intensity
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError("speckle_intensity must satisfy 0 <= low <= high <= 1")
        return self

    @property
    def enabled(self) -> bool:
        return self.speckle_prob > 0 or self.ghost_prob > 0 or self.saturation_prob > 0


@dataclass(frozen=True, eq=False)
class World:
    segments: np.ndarray  # (S, 4) x1, y1, x2, y2
    reflectivity: np.ndarray  # (S,)

    def __post_init__(self):
        segments = np.asarray(self.segments, dtype=np.float64).reshape(-1, 4)
        reflectivity = np.asarray(self.reflectivity, dtype=np.float64).reshape(-1)
        if len(segments) == 0:
            raise ValueError("a world needs at least one segment")
        if len(reflectivity) != len(segments):
            raise ValueError(f"{len(reflectivity)} reflectivities for {len(segments)} segments")
        if not np.all(np.isfinite(segments)):
            raise ValueError("segment coordinates must be finite")
        if not np.all((reflectivity > 0.0) & (reflectivity <= 1.0)):
            raise ValueError("reflectivity must lie in (0, 1]")
        object.__setattr__(self, "segments", segments)
        object.__setattr__(self, "reflectivity", reflectivity)

    @classmethod
    def from_segments(cls, segments: Sequence[Tuple[float, float, float, float]], reflectivity: float = 0.9) -> "World":
        segments = np.asarray(segments, dtype=np.float64).reshape(-1, 4)
        return cls(segments, np.full(len(segments), reflectivity))

    @property
    def bounds(self) -> Tuple[float, float, float, float]:
        xs = self.segments[:, [0, 2]]
        ys = self.segments[:, [1, 3]]
        return float(xs.min()), float(ys.min()), float(xs.max()), float(ys.max())

    def translated(self, dx: float, dy: float) -> "World":
        return World(self.segments + (dx, dy, dx, dy), self.reflectivity)

    def merged(self, other: "World") -> "World":
        return World(np.vstack([self.segments, other.segments]), np.concatenate([self.reflectivity, other.reflectivity]))


@dataclass(frozen=True, eq=False)
class TrajectoryScript:
    """Timed waypoints; motion between them is constant-velocity (linear x, y and shortest-turn yaw)."""

    times: np.ndarray
    waypoints: Tuple[Pose2, ...]

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        if len(times) != len(self.waypoints) or len(times) < 1:
            raise ValueError("a script needs matching, non-empty times and waypoints")
        if len(times) > 1 and not np.all(np.diff(times) > 0):
            raise ValueError("waypoint times must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "waypoints", tuple(self.waypoints))
        yaw = np.array([p.yaw for p in self.waypoints])
        unwrapped = np.concatenate([[yaw[0]], yaw[0] + np.cumsum(wrap_angle(np.diff(yaw)))]) if len(yaw) > 1 else yaw
        object.__setattr__(self, "_unwrapped_yaw", unwrapped)

    @classmethod
    def from_pairs(cls, pairs: Sequence[Tuple[float, Pose2]]) -> "TrajectoryScript":
        return cls(np.array([t for t, _ in pairs]), tuple(p for _, p in pairs))

    @property
    def start(self) -> float:
        return float(self.times[0])

    @property
    def end(self) -> float:
        return float(self.times[-1])

    def poses_at(self, t) -> np.ndarray:
        """(N, 3) poses at the given times."""
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        if np.any(t < self.start - 1e-12) or np.any(t > self.end + 1e-12):
            raise ValueError(f"time outside script window [{self.start}, {self.end}]")
        x = np.interp(t, self.times, [p.x for p in self.waypoints])
        y = np.interp(t, self.times, [p.y for p in self.waypoints])
        yaw = wrap_angle(np.interp(t, self.times, self._unwrapped_yaw))
        return np.column_stack([x, y, np.atleast_1d(yaw)])

    def pose_at(self, t: float) -> Pose2:
        return Pose2.from_array(self.poses_at(t)[0])

    __call__ = pose_at


# --- Rendering ---

def cast_rays(world: World, origins: np.ndarray, angles: np.ndarray, max_range: float) -> Tuple[np.ndarray, np.ndarray]:
    """Nearest segment hit per ray: (range, segment index); inf / -1 without a hit."""
    d = np.column_stack([np.cos(angles), np.sin(angles)])  # (A, 2)
    p = world.segments[:, :2]
    e = world.segments[:, 2:] - p  # (S, 2)
    w = p[None, :, :] - origins[:, None, :]  # (A, S, 2)
    denom = d[:, None, 0] * e[None, :, 1] - d[:, None, 1] * e[None, :, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (w[..., 0] * e[None, :, 1] - w[..., 1] * e[None, :, 0]) / denom
        s = (w[..., 0] * d[:, None, 1] - w[..., 1] * d[:, None, 0]) / denom
    valid = (np.abs(denom) > 1e-12) & (t > 1e-9) & (s >= 0.0) & (s <= 1.0) & (t < max_range)
    t = np.where(valid, t, np.inf)
    segment = np.argmin(t, axis=1)
    ranges = t[np.arange(len(t)), segment]
    segment = np.where(np.isfinite(ranges), segment, -1)
    return ranges, segment


def _deposit(power: np.ndarray, rows: np.ndarray, centers: np.ndarray, amplitude: np.ndarray, sigma: float):
    if len(rows) == 0:
        return
    bins = np.arange(power.shape[1])
    x = bins[None, :] - centers[:, None]
    pulse = amplitude[:, None] * np.exp(-(x * x) / (2.0 * sigma * sigma))
    pulse[np.abs(x) > math.ceil(4.0 * sigma)] = 0.0
    power[rows] = np.maximum(power[rows], pulse)


def azimuth_rng(seed: int, scan_index: int, azimuth: int) -> np.random.Generator:
    """Counter-based stream: the draw for a cell depends only on (seed, scan, azimuth)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, scan_index, azimuth])))


def render_scan(world: World, pose_fn: Callable[[float], Pose2], t_start: float, params: ScanParams = None,
                artifacts: ArtifactConfig = None, scan_index: int = 0) -> PolarScan:
    params = params or ScanParams()
    artifacts = artifacts or ArtifactConfig()
    A, B, res = params.azimuths, params.bins, params.range_resolution

    angles = np.arange(A) * (2.0 * math.pi / A)
    stamps = t_start + np.arange(A) * (params.scan_period / A)
    if hasattr(pose_fn, "poses_at"):
        poses = pose_fn.poses_at(stamps)
    else:
        poses = np.array([pose_fn(float(t)).to_array() for t in stamps])

    ranges, segment = cast_rays(world, poses[:, :2], poses[:, 2] + angles, params.max_range)
    hit = segment >= 0
    power = np.zeros((A, B), dtype=np.float64)
    hit_bin = np.full(A, -1, dtype=np.int64)
    hit_bin[hit] = np.rint(ranges[hit] / res - 0.5).astype(np.int64)
    amplitude = np.zeros(A)
    amplitude[hit] = world.reflectivity[segment[hit]]
    rows = np.flatnonzero(hit)
    _deposit(power, rows, hit_bin[rows].astype(np.float64), amplitude[rows], params.pulse_sigma_bins)

    ghost_bin = np.full(A, -1, dtype=np.int64)
    saturation = np.full((A, 2), -1, dtype=np.int64)
    speckle = np.zeros((0, 2), dtype=np.int64)
    if artifacts.enabled:
        speckle_cells = []
        lo, hi = artifacts.speckle_intensity
        for a in range(A):
            rng = azimuth_rng(artifacts.noise_seed, scan_index, a)
            u = rng.random(B)
            value = rng.uniform(lo, hi, B)
            ghost_draw, saturation_draw = rng.random(2)
            saturation_start = int(rng.integers(0, max(B - artifacts.saturation_bins, 1)))

            cells = np.flatnonzero(u < artifacts.speckle_prob)
            if len(cells):
                power[a, cells] = np.maximum(power[a, cells], value[cells])
                speckle_cells.append(np.column_stack([np.full(len(cells), a), cells]))
            if hit[a] and ghost_draw < artifacts.ghost_prob:
                doubled = 2 * hit_bin[a] + 1  # bin of twice the range
                if doubled < B:
                    ghost_bin[a] = doubled
                    _deposit(power, np.array([a]), np.array([float(doubled)]), np.array([0.5 * amplitude[a]]),
                             params.pulse_sigma_bins)
            if saturation_draw < artifacts.saturation_prob:
                stop = min(saturation_start + artifacts.saturation_bins, B)
                power[a, saturation_start:stop] = 1.0
                saturation[a] = (saturation_start, stop)
        if speckle_cells:
            speckle = np.vstack(speckle_cells)

    labels = {
        "hit_bin": hit_bin,
        "hit_range": np.where(hit, ranges, np.nan),
        "segment": segment,
        "ghost_bin": ghost_bin,
        "speckle": speckle,
        "saturation": saturation,
        "poses": poses,
    }
    return PolarScan(scan_index, np.clip(power, 0.0, 1.0).astype(np.float32), angles, stamps, res, labels)


def scan_start_times(script: TrajectoryScript, n_scans: int, params: ScanParams) -> np.ndarray:
    return script.start + np.arange(n_scans) * params.scan_period


def generate_sequence(world: World, script: TrajectoryScript, n_scans: int, params: ScanParams = None,
                      output_dir=None, artifacts: ArtifactConfig = None, suffix: str = ".rscan",
                      progress_callback: Optional[Callable[[str], None]] = None) -> Tuple[List[Path], Path]:
    """
    Render n_scans consecutive rotations into output_dir together with
    groundtruth.csv (scan start poses) and world.csv.
    """
    params = params or ScanParams()
    log = progress_callback or (lambda msg: None)
    if n_scans < 1:
        raise ValueError(f"n_scans must be positive, got {n_scans}")
    starts = scan_start_times(script, n_scans, params)
    last_stamp = starts[-1] + (params.azimuths - 1) * params.scan_period / params.azimuths
    if last_stamp > script.end + 1e-9:
        raise ValueError(
            f"script ends at {script.end:.3f} s but {n_scans} scans need {last_stamp:.3f} s"
        )
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)

    paths, truth = [], {}
    for k, t0 in enumerate(starts):
        scan = render_scan(world, script, float(t0), params, artifacts, scan_index=k)
        paths.append(write_scan(scan, output_dir / scan_filename(k, suffix)))
        truth[k] = script.pose_at(float(t0))
        if (k + 1) % 50 == 0 or k + 1 == n_scans:
            log(f"🛰️ rendered {k + 1}/{n_scans} scans")
    gt_path = write_trajectory(truth, output_dir / "groundtruth.csv")
    write_world(world, output_dir / "world.csv")
    log(f"💾 sequence written to {output_dir}")
    return paths, gt_path


# --- World and script files ---

def write_world(world: World, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["x1", "y1", "x2", "y2", "reflectivity"])
        for seg, refl in zip(world.segments, world.reflectivity):
            writer.writerow([repr(float(v)) for v in seg] + [repr(float(refl))])
    return path


def read_world(path) -> World:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    segments = [[float(r[c]) for c in ("x1", "y1", "x2", "y2")] for r in rows]
    return World(np.array(segments).reshape(-1, 4), np.array([float(r["reflectivity"]) for r in rows]))


def write_script(script: TrajectoryScript, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["t", "x", "y", "yaw"])
        for t, p in zip(script.times, script.waypoints):
            writer.writerow([repr(float(t)), repr(p.x), repr(p.y), repr(p.yaw)])
    return path


def read_script(path) -> TrajectoryScript:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return TrajectoryScript(np.array([float(r["t"]) for r in rows]),
                            tuple(Pose2(float(r["x"]), float(r["y"]), float(r["yaw"])) for r in rows))


def sample_world_points(world: World, spacing: float = 0.2) -> np.ndarray:
    """Evenly spaced points along every segment, for exact-geometry fixtures."""
    points = []
    for x1, y1, x2, y2 in world.segments:
        length = math.hypot(x2 - x1, y2 - y1)
        n = max(int(length / spacing), 1) + 1
        s = np.linspace(0.0, 1.0, n)
        points.append(np.column_stack([x1 + s * (x2 - x1), y1 + s * (y2 - y1)]))
    return np.vstack(points)


# --- Fixtures ---

def _box(cx: float, cy: float, w: float, h: float) -> List[Tuple[float, float, float, float]]:
    x0, x1, y0, y1 = cx - w / 2, cx + w / 2, cy - h / 2, cy + h / 2
    return [(x0, y0, x1, y0), (x1, y0, x1, y1), (x1, y1, x0, y1), (x0, y1, x0, y0)]


def two_walls(reflectivity: float = 0.9) -> World:
    """Two long perpendicular walls that do not meet: fully constrains a planar registration."""
    return World.from_segments([(-20.0, 8.0, 30.0, 8.0), (40.0, -30.0, 40.0, 20.0)], reflectivity)


def room(width: float = 20.0, height: float = 14.0, reflectivity: float = 0.9) -> World:
    """Rectangular room with a few pillars that break its symmetry."""
    segments = _box(0.0, 0.0, width, height)
    segments += _box(-width / 4, height / 5, 1.5, 1.0)
    segments += _box(width / 5, -height / 4, 1.0, 2.5)
    segments += [(width / 3, height / 4, width / 3 + 2.5, height / 4)]
    return World.from_segments(segments, reflectivity)


def corridor(length: float = 60.0, width: float = 4.0, reflectivity: float = 0.9) -> World:
    """Two long parallel walls; self-similar along its axis."""
    return World.from_segments(
        [(-length / 2, -width / 2, length / 2, -width / 2), (-length / 2, width / 2, length / 2, width / 2)],
        reflectivity,
    )


def gallery(length: float = 200.0, width: float = 12.0, reflectivity: float = 0.9) -> World:
    """Corridor with irregularly spaced wall stubs, so motion along its axis stays observable."""
    segments = [(-length / 2, -width / 2, length / 2, -width / 2), (-length / 2, width / 2, length / 2, width / 2)]
    x = -length / 2 + 5.0
    i = 0
    while x < length / 2 - 5.0:
        side = width / 2 if i % 2 else -width / 2
        inward = -1.5 if i % 2 else 1.5
        segments.append((x, side, x, side + inward))
        x += 6.3 + (i % 3) * 1.1
        i += 1
    return World.from_segments(segments, reflectivity)


def hall(size: float = 60.0, reflectivity: float = 0.9) -> World:
    """Large hall with irregular interior blocks, sized for the square-loop script."""
    h = size / 2
    segments = _box(0.0, 0.0, size, size)
    segments += _box(-6.0, 4.0, 4.0, 3.0)
    segments += _box(7.0, -5.0, 3.0, 6.0)
    segments += _box(3.0, 9.0, 2.0, 2.0)
    segments += [(-h + 5.0, -h + 12.0, -h + 12.0, -h + 16.0), (h - 14.0, h - 6.0, h - 6.0, h - 9.0)]
    segments += _box(-h + 8.0, h - 7.0, 3.0, 1.5)
    segments += _box(h - 7.0, -h + 9.0, 1.5, 4.0)
    return World.from_segments(segments, reflectivity)


def stationary_script(duration: float = 30.0, pose: Pose2 = None) -> TrajectoryScript:
    pose = pose or Pose2.identity()
    return TrajectoryScript(np.array([0.0, duration]), (pose, pose))


def straight_script(speed: float = 1.0, duration: float = 30.0, start: Pose2 = None) -> TrajectoryScript:
    start = start or Pose2.identity()
    end = start.compose(Pose2(speed * duration, 0.0, 0.0))
    return TrajectoryScript(np.array([0.0, duration]), (start, end))


def square_loop_script(side: float = 30.0, speed: float = 1.5, turn_duration: float = 2.0,
                       start: Pose2 = None) -> TrajectoryScript:
    """Drive a square counter-clockwise, turning in place at each corner, ending at the start pose."""
    start = start or Pose2(-side / 2, -side / 2, 0.0)
    leg = side / speed
    times, poses = [0.0], [start]
    pose, t = start, 0.0
    for _ in range(4):
        pose = pose.compose(Pose2(side, 0.0, 0.0))
        t += leg
        times.append(t)
        poses.append(pose)
        pose = pose.compose(Pose2(0.0, 0.0, math.pi / 2))
        t += turn_duration
        times.append(t)
        poses.append(pose)
    return TrajectoryScript(np.array(times), tuple(poses))
