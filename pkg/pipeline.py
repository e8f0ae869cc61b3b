"""
Per-scan tracking loop and run orchestration.

detect -> surface filter -> motion compensation -> warm-started registration
against the local map, repeated with the velocity of the registered pose ->
map update with the probability filter -> velocity update, with the
loop-closure back-end consuming immutable snapshots behind tracking and
owning the pose graph.
"""
import csv
import time
from collections import deque
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Deque, Dict, List, Optional, Tuple

import numpy as np

from config import PipelineConfig, write_config
from evaluation import evaluate_trajectory, read_trajectory, write_trajectory
from feature_detector import detect
from feature_map import FeatureMap
from geometry_filter import filter_surface
from graph_utils import PoseGraph, write_graph_csv
from loop_closure import BackendUpdate, LoopBackend, ScanSnapshot
from motion_model import VelocityEstimate, compensate, estimate_velocity, get_motion_compensator, predict
from registration import RegistrationResult, register
from scan_model import FeatureCloud, PolarScan, Pose2, list_scans, read_scan
from spatial_index import KnnIndex

ProgressCallback = Optional[Callable[[str], None]]


class PipelineError(RuntimeError):
    """Run-level failure such as missing input."""


class FrameWindow:
    """Union of the last n world-frame surface clouds, used as the scan_to_frames local map."""

    def __init__(self, size: int):
        self.clouds: Deque[FeatureCloud] = deque(maxlen=size)
        self._index = KnnIndex(np.zeros((0, 2)))

    def __len__(self) -> int:
        return len(self._index)

    @property
    def index(self) -> KnnIndex:
        return self._index

    def push(self, cloud: FeatureCloud):
        self.clouds.append(cloud)
        xy = np.vstack([c.xy for c in self.clouds]) if self.clouds else np.zeros((0, 2))
        self._index = KnnIndex(xy)


@dataclass
class ScanReport:
    scan_index: int
    stamp: float
    pose: Pose2
    n_raw: int
    n_surface: int
    map_size: int
    registration: Optional[RegistrationResult]
    fallback: bool
    loops_adopted: int
    seconds: Dict[str, float] = field(default_factory=dict)


@dataclass
class PipelineState:
    config: PipelineConfig
    pose: Pose2 = field(default_factory=Pose2.identity)
    velocity: VelocityEstimate = field(default_factory=VelocityEstimate.zero)
    feature_map: FeatureMap = field(default_factory=FeatureMap)
    frames: Optional[FrameWindow] = None
    scan_counter: int = 0
    last_stamp: Optional[float] = None
    trajectory: Dict[int, Pose2] = field(default_factory=dict)
    backend: Optional["BackendRunner"] = None
    loops_adopted: int = 0
    correction: Pose2 = field(default_factory=Pose2.identity)
    corrected: Dict[int, Pose2] = field(default_factory=dict)
    seed: Optional[Tuple[int, FeatureCloud, float, Pose2]] = None

    @classmethod
    def create(cls, config: PipelineConfig, single_thread: bool = True) -> "PipelineState":
        state = cls(config)
        if config.matching == "scan_to_frames":
            state.frames = FrameWindow(config.frames)
        if config.loop_enabled:
            state.backend = BackendRunner(LoopBackend(config.loop, config.icp), single_thread, config.loop.adoption_lag)
        return state

    @property
    def local_map(self):
        return self.frames if self.frames is not None else self.feature_map

    @property
    def map_size(self) -> int:
        return len(self.local_map)

    @property
    def graph(self) -> Optional[PoseGraph]:
        """The loop back-end's pose graph, None when loop closure is off."""
        return self.backend.backend.graph if self.backend is not None else None


class BackendRunner:
    """
    Runs the loop back-end inline or on one worker thread. Results of the
    snapshot submitted at scan k are adopted at the start of scan k + lag in
    both modes, so the outputs do not depend on thread timing.
    """

    def __init__(self, backend: LoopBackend, single_thread: bool = True, lag: int = 1):
        self.backend = backend
        self.lag = lag
        self.executor = None if single_thread else ThreadPoolExecutor(max_workers=1, thread_name_prefix="loop")
        self.pending: Deque[Tuple[int, Future]] = deque()

    def submit(self, snapshot: ScanSnapshot):
        if self.executor is None:
            done: Future = Future()
            done.set_result(self.backend.process(snapshot))
            self.pending.append((snapshot.scan_index, done))
        else:
            self.pending.append((snapshot.scan_index, self.executor.submit(self.backend.process, snapshot)))

    def adopt(self, scan_index: int) -> List[BackendUpdate]:
        """Updates for snapshots submitted at or before scan_index - lag, in order."""
        ready = []
        while self.pending and self.pending[0][0] <= scan_index - self.lag:
            ready.append(self.pending.popleft()[1].result())
        return ready

    def drain(self) -> List[BackendUpdate]:
        ready = [future.result() for _, future in self.pending]
        self.pending.clear()
        return ready

    def close(self):
        if self.executor is not None:
            self.executor.shutdown(wait=True)


def adopt_updates(state: PipelineState, updates: List[BackendUpdate]):
    """
    Fold back-end results into the corrected trajectory. Called between scans
    only; the odometry chain itself is never rewritten.
    """
    for update in updates:
        state.loops_adopted = update.loops_total
        if not update.corrected_poses:
            continue
        state.corrected.update(update.corrected_poses)
        last = max(update.corrected_poses)
        state.correction = update.corrected_poses[last].compose(state.trajectory[last].inverse())
        for k, pose in state.trajectory.items():
            if k > last:
                state.corrected[k] = state.correction.compose(pose)


def _insert(state: PipelineState, world: FeatureCloud, k: int):
    cfg = state.config
    if state.frames is not None:
        state.frames.push(world)
    else:
        hits = state.feature_map.record_hits(world, k, cfg.pfilter)
        state.feature_map.update(world, hits, k, cfg.pfilter, filter_enabled=cfg.probability_filter_enabled)


def _reseed(state: PipelineState, velocity: VelocityEstimate):
    """Rebuild the map from the first scan, deskewed with the first measured velocity."""
    k0, surface, stamp, pose = state.seed
    if state.frames is not None:
        state.frames = FrameWindow(state.config.frames)
    else:
        state.feature_map = FeatureMap()
    _insert(state, compensate(surface, velocity, stamp).transformed(pose), k0)


def _refine(state: PipelineState, surface: FeatureCloud, stamp: float, dt: float,
            result: RegistrationResult, deskewed: FeatureCloud) -> Tuple[RegistrationResult, FeatureCloud]:
    """Deskew again with the velocity implied by the registered pose and re-register from there."""
    cfg = state.config
    used = state.velocity
    for _ in range(cfg.motion.refinements):
        velocity = estimate_velocity(state.pose, result.pose, dt)
        if state.seed is not None:
            _reseed(state, velocity)
        candidate = compensate(surface, velocity, stamp)
        refined = register(candidate, state.local_map, result.pose, cfg.icp)
        if not refined.converged:
            break
        result, deskewed, used = refined, candidate, velocity
    if state.seed is not None:
        _reseed(state, used)
    return result, deskewed


def process_scan(state: PipelineState, scan: PolarScan) -> ScanReport:
    cfg = state.config
    k = scan.scan_index
    if k != state.scan_counter:
        raise ValueError(f"expected scan {state.scan_counter}, got {k}")
    clock = time.perf_counter
    seconds = {}

    if state.backend is not None:
        adopt_updates(state, state.backend.adopt(k))

    t = clock()
    raw = detect(scan, cfg.detector)
    seconds["detect"] = clock() - t

    t = clock()
    surface = filter_surface(raw, cfg.geometry) if cfg.geometry_filter_enabled else raw
    seconds["filter"] = clock() - t

    stamp = scan.start_time
    dt = stamp - state.last_stamp if state.last_stamp is not None else None
    moving = dt is not None and dt > 0
    deskewed = get_motion_compensator(cfg.motion).deskew(surface, state.velocity, stamp)
    prediction = state.pose.compose(predict(state.velocity, dt)) if moving else state.pose

    t = clock()
    result = None
    fallback = False
    if len(state.local_map) == 0:
        pose = prediction
        if cfg.motion.compensation_enabled and not state.trajectory:
            state.seed = (k, surface, stamp, pose)
    else:
        result = register(deskewed, state.local_map, prediction, cfg.icp)
        if result.converged and moving and cfg.motion.compensation_enabled:
            result, deskewed = _refine(state, surface, stamp, dt, result, deskewed)
        pose = result.pose if result.converged else prediction
        fallback = not result.converged
    if state.seed is not None and state.seed[0] != k:
        state.seed = None
    seconds["register"] = clock() - t

    t = clock()
    _insert(state, deskewed.transformed(pose), k)
    seconds["map"] = clock() - t

    if moving:
        state.velocity = estimate_velocity(state.pose, pose, dt)
    state.pose = pose
    state.trajectory[k] = pose
    state.last_stamp = stamp
    state.scan_counter = k + 1

    if state.backend is not None:
        state.corrected[k] = state.correction.compose(pose)
        state.backend.submit(ScanSnapshot(k, pose, deskewed))

    return ScanReport(k, stamp, pose, len(raw), len(surface), state.map_size, result, fallback,
                      state.loops_adopted, seconds)


# --- Run ---

TIMING_COLUMNS = ["scan_index", "stamp", "n_raw", "n_surface", "map_size", "iterations", "inliers",
                  "final_cost", "converged", "fallback", "loops_adopted"]
WALLCLOCK_COLUMNS = ["t_detect", "t_filter", "t_register", "t_map"]
LOOP_COLUMNS = ["query", "match", "distance", "yaw_hint", "accepted", "reason", "x", "y", "yaw"]


@dataclass
class RunSummary:
    output_dir: Path
    scans: int
    fallbacks: int
    loops: int
    map_size: int
    odometry_path: Path
    corrected_path: Optional[Path]
    seconds: float = 0.0


def _timing_row(report: ScanReport, wallclock: bool) -> list:
    r = report.registration
    row = [report.scan_index, repr(report.stamp), report.n_raw, report.n_surface, report.map_size,
           r.iterations if r else 0, r.inlier_count if r else 0, repr(r.final_cost) if r else repr(0.0),
           int(bool(r and r.converged)), int(report.fallback), report.loops_adopted]
    if wallclock:
        row += [f"{report.seconds.get(name, 0.0):.6f}" for name in ("detect", "filter", "register", "map")]
    return row


def run(config: PipelineConfig, input_dir, output_dir, single_thread: bool = True,
        progress_callback: ProgressCallback = None, max_scans: Optional[int] = None) -> RunSummary:
    """Process every scan of input_dir and write trajectories, map and logs to output_dir."""
    log = progress_callback or (lambda msg: None)
    paths = list_scans(input_dir)
    if max_scans is not None:
        paths = paths[:max_scans]
    if not paths:
        raise PipelineError(f"no scans found in {input_dir}")
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    write_config(config, output_dir / "config.resolved.env")

    log(f"🔎 {len(paths)} scans in {input_dir}, matching {config.matching_label}")
    state = PipelineState.create(config, single_thread)
    columns = TIMING_COLUMNS + (WALLCLOCK_COLUMNS if config.record_wallclock else [])
    fallbacks = 0
    started = time.perf_counter()
    try:
        with open(output_dir / "timing.csv", "w", newline="") as timing_file:
            timing = csv.writer(timing_file)
            timing.writerow(columns)
            for n, path in enumerate(paths):
                scan = read_scan(path)
                if n == 0:
                    state.scan_counter = scan.scan_index
                report = process_scan(state, scan)
                timing.writerow(_timing_row(report, config.record_wallclock))
                if report.fallback:
                    fallbacks += 1
                    log(f"⚠️ scan {report.scan_index}: registration did not converge, using prediction")
                if (n + 1) % 50 == 0:
                    log(f"🛰️ {n + 1}/{len(paths)} scans, map {report.map_size} points")
        if state.backend is not None:
            adopt_updates(state, state.backend.drain())
    finally:
        if state.backend is not None:
            state.backend.close()

    odometry_path = write_trajectory(state.trajectory, output_dir / "odometry.csv")
    if state.frames is None:
        state.feature_map.export_csv(output_dir / "map.csv")
    else:
        _write_frames_csv(state.frames, output_dir / "map.csv")

    corrected_path = None
    loops = 0
    with open(output_dir / "loop_events.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(LOOP_COLUMNS)
        if state.backend is not None:
            for e in state.backend.backend.events:
                pose = e.relative_pose
                writer.writerow([e.query_scan, e.match_scan, repr(e.descriptor_distance), repr(e.yaw_hint),
                                 int(e.accepted), e.reason,
                                 *((repr(pose.x), repr(pose.y), repr(pose.yaw)) if pose else ("", "", ""))])
    if state.backend is not None:
        backend = state.backend.backend
        loops = len(backend.graph.loop_edges())
        corrected_path = write_trajectory(state.corrected, output_dir / "corrected.csv")
        write_graph_csv(backend.graph, output_dir / "graph_nodes.csv", output_dir / "graph_edges.csv")
        log(f"🔁 {loops} loop closures accepted")

    elapsed = time.perf_counter() - started
    log(f"✅ {len(paths)} scans in {elapsed:.1f} s ({len(paths) / max(elapsed, 1e-9):.1f} scans/s), "
        f"{fallbacks} fallbacks")
    log(f"💾 outputs written to {output_dir}")
    return RunSummary(output_dir, len(paths), fallbacks, loops, state.map_size, odometry_path, corrected_path, elapsed)


def _write_frames_csv(frames: FrameWindow, path) -> Path:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["x", "y", "R", "H", "P", "birth_scan"])
        for cloud in frames.clouds:
            for x, y in cloud.xy:
                writer.writerow([repr(float(x)), repr(float(y)), "", "", "", cloud.scan_index])
    return Path(path)


# --- Ablation ---

def ablation_variants(config: PipelineConfig, frames: int = 9) -> Dict[str, PipelineConfig]:
    return {
        "full": config,
        "no_probability_filter": config.model_copy(update={"probability_filter_enabled": False}),
        "no_geometry_filter": config.model_copy(update={"geometry_filter_enabled": False}),
        f"scan_to_frames({frames})": config.model_copy(update={"matching": "scan_to_frames", "frames": frames}),
        "no_loop": config.model_copy(update={"loop_enabled": False}),
    }


def ablate(config: PipelineConfig, input_dir, gt_path, output_dir, frames: int = 9, single_thread: bool = True,
           progress_callback: ProgressCallback = None) -> List[dict]:
    """Run each variant on the same input and tabulate drift and ATE in ablation.csv."""
    log = progress_callback or (lambda msg: None)
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    gt = read_trajectory(gt_path)
    rows = []
    for name, variant in ablation_variants(config, frames).items():
        log(f"🧪 variant {name}")
        summary = run(variant, input_dir, output_dir / name.replace("(", "_").replace(")", ""), single_thread)
        row = {"variant": name, "trajectory": "odometry", **evaluate_trajectory(read_trajectory(summary.odometry_path), gt)}
        rows.append(row)
        if summary.corrected_path is not None and name == "full":
            rows.append({"variant": name, "trajectory": "corrected",
                         **evaluate_trajectory(read_trajectory(summary.corrected_path), gt)})

    columns = ["variant", "trajectory", "trans_pct", "rot_deg_per_100m", "ate_rmse", "endpoint_error"]
    with open(output_dir / "ablation.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for row in rows:
            writer.writerow(["" if row[c] is None else (repr(row[c]) if isinstance(row[c], float) else row[c])
                             for c in columns])
    log(f"💾 ablation table written to {output_dir / 'ablation.csv'}")
    return rows
