"""
Scan-to-map pose estimation with a point-to-line ICP.

Each source point is associated with the k nearest target points; their centroid
and principal direction define a local line, and the residual is the signed
perpendicular distance to that line. The pose is refined by Huber-weighted
Gauss-Newton with re-association every iteration.
"""
import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from pydantic import BaseModel, Field

from geometry_filter import neighborhood_pca
from scan_model import FeatureCloud, Point2, Pose2, wrap_angle
from spatial_index import KnnIndex


class RegistrationConfig(BaseModel):
    max_iterations: int = Field(30, ge=1, description="Gauss-Newton iteration cap")
    correspondence_k: int = Field(5, ge=2, description="Target points per correspondence")
    max_correspondence_dist: float = Field(3.0, gt=0.0, description="Farthest allowed neighbour in meters")
    linearity_gate: float = Field(0.5, gt=0.0, lt=1.0, description="Minimum linearity of a correspondence set")
    convergence_eps_trans: float = Field(1e-4, gt=0.0, description="Translation step below which ICP stops")
    convergence_eps_rot: float = Field(1e-5, gt=0.0, description="Rotation step below which ICP stops")
    plateau_eps_trans: float = Field(1e-2, gt=0.0, description="Translation step below which a cost plateau counts as converged")
    plateau_eps_rot: float = Field(1e-3, gt=0.0, description="Rotation step below which a cost plateau counts as converged")
    convergence_cost_rel: float = Field(1e-3, gt=0.0, description="Relative change of the mean squared residual that counts as a plateau")
    huber_delta: float = Field(0.35, gt=0.0, description="Huber threshold on residuals in meters")
    min_correspondences: int = Field(3, ge=3, description="Valid correspondences needed per iteration")


@dataclass(frozen=True)
class Correspondence:
    source: Point2
    target_centroid: Point2
    line_dir: tuple
    valid: bool


@dataclass(frozen=True)
class CorrespondenceSet:
    """Batched correspondences for an (n, 2) array of world-frame source points."""

    centroid: np.ndarray
    direction: np.ndarray
    valid: np.ndarray
    neighbors: np.ndarray  # (n, k) target indices, -1 when missing

    @property
    def count(self) -> int:
        return int(self.valid.sum())


@dataclass(frozen=True)
class RegistrationResult:
    pose: Pose2
    iterations: int
    final_cost: float
    inlier_count: int
    converged: bool
    initial_cost: float = 0.0


def target_index(target) -> KnnIndex:
    """Accept a KnnIndex or anything exposing one as `.index` (FeatureMap, FrameWindow)."""
    return target if isinstance(target, KnnIndex) else target.index


def find_correspondences(xy: np.ndarray, target, cfg: RegistrationConfig) -> CorrespondenceSet:
    index = target_index(target)
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    n, k = len(xy), cfg.correspondence_k
    centroid = np.zeros((n, 2))
    direction = np.zeros((n, 2))
    valid = np.zeros(n, dtype=bool)
    if len(index) < k or n == 0:
        return CorrespondenceSet(centroid, direction, valid, np.full((n, k), -1, dtype=np.int64))

    dist, neighbors = index.query(xy, k)
    close = np.isfinite(dist[:, -1]) & (dist[:, -1] <= cfg.max_correspondence_dist)
    if close.any():
        pca = neighborhood_pca(index.xy[np.sort(neighbors[close], axis=1)])
        centroid[close] = pca.centroid
        direction[close] = pca.direction
        valid[close] = pca.linearity >= cfg.linearity_gate
    return CorrespondenceSet(centroid, direction, valid, neighbors)


def find_correspondence(p: Point2, target, k: int = 5, cfg: RegistrationConfig = None) -> Correspondence:
    cfg = (cfg or RegistrationConfig()).model_copy(update={"correspondence_k": k})
    found = find_correspondences(np.array([[p.x, p.y]]), target, cfg)
    cx, cy = found.centroid[0]
    dx, dy = found.direction[0]
    return Correspondence(p, Point2(float(cx), float(cy)), (float(dx), float(dy)), bool(found.valid[0]))


def point_to_line_residuals(world_xy: np.ndarray, centroid: np.ndarray, direction: np.ndarray) -> np.ndarray:
    """Scalar cross product (q - c) x d, i.e. the signed distance to the line through c along d."""
    diff = world_xy - centroid
    return diff[:, 0] * direction[:, 1] - diff[:, 1] * direction[:, 0]


def huber_weights(residuals: np.ndarray, delta: float) -> np.ndarray:
    magnitude = np.abs(residuals)
    return np.where(magnitude <= delta, 1.0, delta / np.maximum(magnitude, 1e-300))


def huber_cost(residuals: np.ndarray, delta: float) -> float:
    magnitude = np.abs(residuals)
    quadratic = np.minimum(magnitude, delta)
    return float(np.sum(0.5 * quadratic**2 + delta * (magnitude - quadratic)))


def _gauss_newton_step(source_xy, pose: Pose2, corr: CorrespondenceSet, delta: float):
    src = source_xy[corr.valid]
    centroid = corr.centroid[corr.valid]
    direction = corr.direction[corr.valid]
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    rotated = np.column_stack([c * src[:, 0] - s * src[:, 1], s * src[:, 0] + c * src[:, 1]])
    world = rotated + (pose.x, pose.y)
    r = point_to_line_residuals(world, centroid, direction)

    J = np.empty((len(r), 3))
    J[:, 0] = direction[:, 1]
    J[:, 1] = -direction[:, 0]
    # d(world)/d(yaw) = (-rotated_y, rotated_x)
    J[:, 2] = -rotated[:, 1] * direction[:, 1] - rotated[:, 0] * direction[:, 0]

    w = huber_weights(r, delta)
    H = J.T @ (J * w[:, None])
    g = J.T @ (w * r)
    damping = 1e-6 * np.trace(H)
    step = -np.linalg.solve(H + damping * np.eye(3), g)
    return step


def _within(a: Pose2, b: Pose2, eps_trans: float, eps_rot: float) -> bool:
    return math.hypot(a.x - b.x, a.y - b.y) < eps_trans and abs(wrap_angle(a.yaw - b.yaw)) < eps_rot


def register(
    source: FeatureCloud,
    target: Union[KnnIndex, object],
    T_init: Pose2,
    cfg: RegistrationConfig = None,
) -> RegistrationResult:
    """
    Estimate the world pose of `source` (sensor frame) against a target map.

    Converges when a step falls below the eps thresholds, or when steps are
    already small and the mean squared residual has plateaued or the pose is
    cycling between two correspondence sets.
    """
    cfg = cfg or RegistrationConfig()
    if len(source) == 0 or not T_init.is_finite():
        return RegistrationResult(T_init, 0, 0.0, 0, False)

    source_xy = source.xy
    pose = T_init
    previous_pose = None
    initial_cost = None
    previous_mean = None
    converged = False
    iterations = 0
    for iterations in range(1, cfg.max_iterations + 1):
        corr = find_correspondences(pose.transform_xy(source_xy), target, cfg)
        if corr.count < cfg.min_correspondences:
            return RegistrationResult(T_init, iterations, 0.0, corr.count, False, initial_cost or 0.0)
        cost = _squared_cost(source_xy, pose, corr)
        if initial_cost is None:
            initial_cost = cost
        try:
            step = _gauss_newton_step(source_xy, pose, corr, cfg.huber_delta)
        except np.linalg.LinAlgError:
            return RegistrationResult(T_init, iterations, 0.0, corr.count, False, initial_cost)
        if not np.all(np.isfinite(step)):
            return RegistrationResult(T_init, iterations, 0.0, corr.count, False, initial_cost)
        stepped = Pose2(pose.x + step[0], pose.y + step[1], pose.yaw + step[2])

        mean = cost / corr.count
        moved = math.hypot(step[0], step[1])
        if moved < cfg.convergence_eps_trans and abs(step[2]) < cfg.convergence_eps_rot:
            converged = True
        elif moved < cfg.plateau_eps_trans and abs(step[2]) < cfg.plateau_eps_rot:
            plateau = previous_mean is not None and abs(previous_mean - mean) <= cfg.convergence_cost_rel * previous_mean
            cycling = previous_pose is not None and _within(
                stepped, previous_pose, cfg.convergence_eps_trans, cfg.convergence_eps_rot
            )
            converged = plateau or cycling
        previous_pose, pose, previous_mean = pose, stepped, mean
        if converged:
            break

    corr = find_correspondences(pose.transform_xy(source_xy), target, cfg)
    if corr.count < cfg.min_correspondences:
        return RegistrationResult(T_init, iterations, 0.0, corr.count, False, initial_cost)
    final_cost = _squared_cost(source_xy, pose, corr)
    return RegistrationResult(pose, iterations, final_cost, corr.count, converged, initial_cost)


def _squared_cost(source_xy: np.ndarray, pose: Pose2, corr: CorrespondenceSet) -> float:
    world = pose.transform_xy(source_xy[corr.valid])
    r = point_to_line_residuals(world, corr.centroid[corr.valid], corr.direction[corr.valid])
    return float(np.sum(r * r))
