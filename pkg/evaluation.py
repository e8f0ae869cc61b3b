"""
Trajectory accuracy metrics: KITTI-style relative drift over fixed path lengths
and absolute trajectory error after rigid SE(2) alignment.
"""
import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from scan_model import Pose2

DRIFT_LENGTHS = (100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0)


@dataclass(frozen=True)
class Trajectory:
    """Poses keyed by scan index, in increasing index order."""

    indices: np.ndarray
    poses: Tuple[Pose2, ...]

    def __post_init__(self):
        indices = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        if len(indices) != len(self.poses):
            raise ValueError(f"{len(indices)} indices for {len(self.poses)} poses")
        if len(indices) > 1 and not np.all(np.diff(indices) > 0):
            raise ValueError("trajectory indices must be strictly increasing")
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "poses", tuple(self.poses))

    @classmethod
    def from_dict(cls, poses: Dict[int, Pose2]) -> "Trajectory":
        keys = sorted(poses)
        return cls(np.array(keys, dtype=np.int64), tuple(poses[k] for k in keys))

    @classmethod
    def from_pairs(cls, pairs: Sequence[Tuple[int, Pose2]]) -> "Trajectory":
        return cls.from_dict(dict(pairs))

    def __len__(self) -> int:
        return len(self.poses)

    def as_dict(self) -> Dict[int, Pose2]:
        return {int(i): p for i, p in zip(self.indices, self.poses)}

    @property
    def xy(self) -> np.ndarray:
        return np.array([(p.x, p.y) for p in self.poses]).reshape(-1, 2)

    @property
    def yaw(self) -> np.ndarray:
        return np.array([p.yaw for p in self.poses])

    def path_length(self) -> float:
        return float(self.arc_length()[-1]) if len(self) else 0.0

    def arc_length(self) -> np.ndarray:
        steps = np.linalg.norm(np.diff(self.xy, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(steps)])


def pair_trajectories(est: Trajectory, gt: Trajectory) -> Tuple[Trajectory, Trajectory]:
    """Restrict both trajectories to their shared scan indices."""
    shared = np.intersect1d(est.indices, gt.indices)
    e, g = est.as_dict(), gt.as_dict()
    return (Trajectory(shared, tuple(e[int(i)] for i in shared)),
            Trajectory(shared, tuple(g[int(i)] for i in shared)))


def write_trajectory(trajectory, path) -> Path:
    if isinstance(trajectory, dict):
        trajectory = Trajectory.from_dict(trajectory)
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["scan_index", "x", "y", "yaw"])
        for i, pose in zip(trajectory.indices, trajectory.poses):
            writer.writerow([int(i), repr(pose.x), repr(pose.y), repr(pose.yaw)])
    return path


def read_trajectory(path) -> Trajectory:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return Trajectory(
        np.array([int(r["scan_index"]) for r in rows], dtype=np.int64),
        tuple(Pose2(float(r["x"]), float(r["y"]), float(r["yaw"])) for r in rows),
    )


# --- Relative drift ---

@dataclass(frozen=True)
class DriftSegment:
    start: int
    length: float
    trans_error: float  # meters per meter
    rot_error: float  # radians per meter


def drift_segments(est: Trajectory, gt: Trajectory, lengths=DRIFT_LENGTHS) -> List[DriftSegment]:
    est, gt = pair_trajectories(est, gt)
    if len(gt) < 2:
        raise ValueError("drift needs at least 2 paired poses")
    arc = gt.arc_length()
    if arc[-1] < min(lengths) - 1e-9:
        raise ValueError(
            f"ground truth path is {arc[-1]:.1f} m, shorter than {min(lengths):.0f} m; use ate_rmse instead"
        )
    segments = []
    for first in range(len(gt)):
        for length in lengths:
            last = int(np.searchsorted(arc, arc[first] + length - 1e-9, side="left"))
            if last >= len(gt):
                continue
            rel_gt = gt.poses[first].between(gt.poses[last])
            rel_est = est.poses[first].between(est.poses[last])
            error = rel_est.inverse().compose(rel_gt)
            segments.append(DriftSegment(first, length, math.hypot(error.x, error.y) / length, abs(error.yaw) / length))
    return segments


def kitti_drift(est: Trajectory, gt: Trajectory, lengths=DRIFT_LENGTHS) -> Tuple[float, float]:
    """Mean translation drift in percent and rotation drift in degrees per 100 m."""
    segments = drift_segments(est, gt, lengths)
    if not segments:
        return 0.0, 0.0
    trans = np.mean([s.trans_error for s in segments])
    rot = np.mean([s.rot_error for s in segments])
    return float(trans * 100.0), float(np.degrees(rot) * 100.0)


def drift_table(est: Trajectory, gt: Trajectory, lengths=DRIFT_LENGTHS) -> List[dict]:
    segments = drift_segments(est, gt, lengths)
    rows = []
    for length in lengths:
        chosen = [s for s in segments if s.length == length]
        if not chosen:
            continue
        rows.append({
            "length": length,
            "segments": len(chosen),
            "trans_pct": float(np.mean([s.trans_error for s in chosen]) * 100.0),
            "rot_deg_per_100m": float(np.degrees(np.mean([s.rot_error for s in chosen])) * 100.0),
        })
    return rows


# --- Absolute trajectory error ---

def align_se2(source_xy: np.ndarray, target_xy: np.ndarray) -> Pose2:
    """Rigid transform (no scale) minimizing sum ||T(source_i) - target_i||^2."""
    source_xy = np.asarray(source_xy, dtype=np.float64).reshape(-1, 2)
    target_xy = np.asarray(target_xy, dtype=np.float64).reshape(-1, 2)
    source_mean, target_mean = source_xy.mean(axis=0), target_xy.mean(axis=0)
    s = source_xy - source_mean
    t = target_xy - target_mean
    h = s.T @ t
    angle = math.atan2(h[0, 1] - h[1, 0], h[0, 0] + h[1, 1])
    c, si = math.cos(angle), math.sin(angle)
    rotated = np.array([c * source_mean[0] - si * source_mean[1], si * source_mean[0] + c * source_mean[1]])
    offset = target_mean - rotated
    return Pose2(offset[0], offset[1], angle)


def ate_rmse(est: Trajectory, gt: Trajectory) -> float:
    est, gt = pair_trajectories(est, gt)
    if len(est) < 2:
        raise ValueError(f"ate_rmse needs at least 2 paired poses, got {len(est)}")
    alignment = align_se2(est.xy, gt.xy)
    residual = alignment.transform_xy(est.xy) - gt.xy
    return float(np.sqrt(np.mean(np.sum(residual * residual, axis=1))))


def endpoint_error(est: Trajectory, gt: Trajectory) -> float:
    """Translation error of the last pose relative to the first, frame-independent."""
    est, gt = pair_trajectories(est, gt)
    if len(est) < 2:
        raise ValueError("endpoint_error needs at least 2 paired poses")
    rel_est = est.poses[0].between(est.poses[-1])
    rel_gt = gt.poses[0].between(gt.poses[-1])
    error = rel_est.inverse().compose(rel_gt)
    return math.hypot(error.x, error.y)


# --- Reports ---

def evaluate_trajectory(est: Trajectory, gt: Trajectory) -> dict:
    row = {"poses": len(pair_trajectories(est, gt)[0]), "ate_rmse": ate_rmse(est, gt),
           "endpoint_error": endpoint_error(est, gt), "trans_pct": None, "rot_deg_per_100m": None}
    try:
        row["trans_pct"], row["rot_deg_per_100m"] = kitti_drift(est, gt)
    except ValueError:
        pass  # short sequence: ATE only
    return row


def evaluate_run(estimates: Dict[str, object], gt_path, output_dir,
                 progress_callback: Optional[Callable[[str], None]] = None) -> List[dict]:
    """
    Evaluate named trajectory files against ground truth and write
    report.csv plus a readable report.txt into output_dir.
    """
    log = progress_callback or (lambda msg: None)
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    gt = read_trajectory(gt_path)
    rows = []
    tables = {}
    for name, path in estimates.items():
        if not Path(path).exists():
            log(f"⚠️ {name}: {path} not found, skipped")
            continue
        est = read_trajectory(path)
        row = {"trajectory": name, **evaluate_trajectory(est, gt)}
        rows.append(row)
        if row["trans_pct"] is not None:
            tables[name] = drift_table(est, gt)
        log(f"📏 {name}: ATE {row['ate_rmse']:.3f} m")

    columns = ["trajectory", "poses", "trans_pct", "rot_deg_per_100m", "ate_rmse", "endpoint_error"]
    with open(output_dir / "report.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for row in rows:
            writer.writerow(["" if row[c] is None else (repr(row[c]) if isinstance(row[c], float) else row[c])
                             for c in columns])

    lines = [f"Ground truth: {gt_path} ({len(gt)} poses, {gt.path_length():.1f} m)", ""]
    for row in rows:
        lines.append(f"{row['trajectory']}")
        lines.append(f"  ATE RMSE        {row['ate_rmse']:.4f} m")
        lines.append(f"  endpoint error  {row['endpoint_error']:.4f} m")
        if row["trans_pct"] is None:
            lines.append("  drift           n/a (path shorter than 100 m)")
        else:
            lines.append(f"  drift           {row['trans_pct']:.3f} %  {row['rot_deg_per_100m']:.3f} deg/100m")
            for t in tables[row["trajectory"]]:
                lines.append(f"    {t['length']:>5.0f} m  {t['trans_pct']:.3f} %  {t['rot_deg_per_100m']:.3f} deg/100m"
                             f"  ({t['segments']} segments)")
        lines.append("")
    (output_dir / "report.txt").write_text("\n".join(lines))
    log(f"💾 report written to {output_dir}")
    return rows
