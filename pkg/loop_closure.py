"""
Loop closure back-end: polar ring/sector descriptors of surface clouds,
shift-invariant matching, ICP verification and SE(2) pose-graph optimization.
"""
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy.sparse as sp
from pydantic import BaseModel, Field
from scipy.sparse.linalg import splu

from graph_utils import Edge, PoseGraph, information_from_sigmas
from registration import RegistrationConfig, register
from scan_model import FeatureCloud, Pose2, wrap_angle
from spatial_index import KnnIndex


class LoopConfig(BaseModel):
    n_ring: int = Field(20, ge=1, description="Range rings of the descriptor")
    n_sector: int = Field(60, ge=2, description="Azimuth sectors of the descriptor")
    ring_max_range: float = Field(100.0, gt=0.0, description="Outer radius of the descriptor in meters")
    distance_threshold: float = Field(0.25, gt=0.0, le=1.0, description="Descriptor distance accepted as a candidate")
    min_separation: int = Field(50, ge=1, description="Scans between a query and its earliest allowed match")
    ring_key_candidates: int = Field(10, ge=1, description="Candidates kept by the ring-key pre-selection")
    max_verifications: int = Field(3, ge=1, description="Candidates verified per query, best first")
    cost_gate: float = Field(0.04, gt=0.0, description="Accepted ICP cost per inlier in square meters")
    inlier_gate: int = Field(30, ge=3, description="Minimum ICP inliers for an accepted loop")
    store_size: int = Field(2000, ge=1, description="Most recent surface clouds retained for verification")
    odometry_sigmas: Tuple[float, float, float] = Field((0.05, 0.05, 0.005), description="Odometry edge sigmas (m, m, rad)")
    loop_sigmas: Tuple[float, float, float] = Field((0.1, 0.1, 0.01), description="Loop edge sigmas (m, m, rad)")
    robust_delta: float = Field(0.0, ge=0.0, description="Huber threshold on whitened edge errors; 0 disables")
    max_iterations: int = Field(50, ge=1, description="Graph optimization iteration cap")
    step_tolerance: float = Field(1e-6, gt=0.0, description="Graph optimization stops below this step norm")
    adoption_lag: int = Field(1, ge=0, description="Scans between submitting a snapshot and adopting its result")


# --- Descriptor ---

@dataclass(frozen=True, eq=False)
class ScanDescriptor:
    matrix: np.ndarray  # (n_ring, n_sector)
    ring_max_range: float

    @property
    def sector_width(self) -> float:
        return 2.0 * math.pi / self.matrix.shape[1]

    @property
    def ring_key(self) -> np.ndarray:
        return self.matrix.mean(axis=1)

    def is_empty(self) -> bool:
        return not np.any(self.matrix)


def describe(cloud: FeatureCloud, cfg: LoopConfig = None) -> ScanDescriptor:
    """Max feature intensity per (range ring, azimuth sector) cell of a sensor-frame cloud."""
    cfg = cfg or LoopConfig()
    matrix = np.zeros((cfg.n_ring, cfg.n_sector))
    if len(cloud):
        ranges = np.hypot(cloud.xy[:, 0], cloud.xy[:, 1])
        angles = np.mod(np.arctan2(cloud.xy[:, 1], cloud.xy[:, 0]), 2.0 * math.pi)
        inside = ranges < cfg.ring_max_range
        ring = np.floor(ranges[inside] / (cfg.ring_max_range / cfg.n_ring)).astype(np.int64)
        sector = np.floor(angles[inside] / (2.0 * math.pi / cfg.n_sector)).astype(np.int64)
        ring = np.clip(ring, 0, cfg.n_ring - 1)
        sector = np.clip(sector, 0, cfg.n_sector - 1)
        np.maximum.at(matrix, (ring, sector), np.clip(cloud.intensity[inside], 0.0, 1.0))
    return ScanDescriptor(matrix, cfg.ring_max_range)


def descriptor_distance(query: ScanDescriptor, candidate: ScanDescriptor) -> Tuple[float, int]:
    """
    Minimum over column shifts of the mean column cosine distance.

    Returns (distance, shift) where rolling the query by `shift` columns lines it
    up with the candidate. Columns empty in both descriptors are ignored.
    """
    q, c = query.matrix, candidate.matrix
    q_norm = np.linalg.norm(q, axis=0)
    c_norm = np.linalg.norm(c, axis=0)
    qn = np.divide(q, q_norm, out=np.zeros_like(q), where=q_norm > 0)
    cn = np.divide(c, c_norm, out=np.zeros_like(c), where=c_norm > 0)
    c_empty = c_norm == 0
    best, best_shift = math.inf, 0
    for shift in range(q.shape[1]):
        q_shift = np.roll(qn, shift, axis=1)
        considered = ~(np.roll(q_norm == 0, shift) & c_empty)
        if not considered.any():
            distance = 0.0
        else:
            similarity = np.sum(q_shift * cn, axis=0)
            distance = float(np.mean(1.0 - similarity[considered]))
        if distance < best:
            best, best_shift = distance, shift
    return max(best, 0.0), best_shift


@dataclass(frozen=True)
class LoopCandidate:
    query_scan: int
    match_scan: int
    descriptor_distance: float
    yaw_hint: float


class LoopDetector:
    """Descriptor database with ring-key pre-selection."""

    def __init__(self, cfg: LoopConfig = None):
        self.cfg = cfg or LoopConfig()
        self.scans: List[int] = []
        self.descriptors: List[ScanDescriptor] = []

    def __len__(self) -> int:
        return len(self.scans)

    def add(self, scan_index: int, descriptor: ScanDescriptor):
        if descriptor.is_empty():
            return
        self.scans.append(int(scan_index))
        self.descriptors.append(descriptor)

    def match(self, query: ScanDescriptor, query_scan: int) -> List[LoopCandidate]:
        cfg = self.cfg
        if query.is_empty():
            return []
        eligible = [i for i, s in enumerate(self.scans) if s < query_scan - cfg.min_separation]
        if not eligible:
            return []
        keys = np.array([self.descriptors[i].ring_key for i in eligible])
        key_dist = np.linalg.norm(keys - query.ring_key, axis=1)
        shortlist = [eligible[i] for i in np.argsort(key_dist, kind="stable")[: cfg.ring_key_candidates]]

        found = []
        for i in shortlist:
            distance, shift = descriptor_distance(query, self.descriptors[i])
            if distance < cfg.distance_threshold:
                yaw = wrap_angle(shift * query.sector_width)
                found.append(LoopCandidate(int(query_scan), self.scans[i], distance, yaw))
        found.sort(key=lambda c: (c.descriptor_distance, c.match_scan))
        return found


class CloudStore:
    """Surface clouds of the most recent scans, evicting the oldest first."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._clouds: "OrderedDict[int, FeatureCloud]" = OrderedDict()

    def __len__(self) -> int:
        return len(self._clouds)

    def __contains__(self, scan_index: int) -> bool:
        return scan_index in self._clouds

    def get(self, scan_index: int) -> Optional[FeatureCloud]:
        return self._clouds.get(scan_index)

    def put(self, scan_index: int, cloud: FeatureCloud):
        self._clouds[scan_index] = cloud
        while len(self._clouds) > self.capacity:
            self._clouds.popitem(last=False)


# --- Verification ---

@dataclass(frozen=True)
class LoopEvent:
    query_scan: int
    match_scan: int
    descriptor_distance: float
    yaw_hint: float
    accepted: bool
    reason: str
    relative_pose: Optional[Pose2] = None


def verify(cand: LoopCandidate, clouds, icp: RegistrationConfig = None, cfg: LoopConfig = None) -> LoopEvent:
    """Register the query cloud against the match cloud, seeded with the descriptor yaw."""
    icp = icp or RegistrationConfig()
    cfg = cfg or LoopConfig()
    query, match = clouds.get(cand.query_scan), clouds.get(cand.match_scan)
    if query is None or match is None:
        return LoopEvent(cand.query_scan, cand.match_scan, cand.descriptor_distance, cand.yaw_hint, False, "cloud_missing")
    result = register(query, KnnIndex(match.xy), Pose2(0.0, 0.0, cand.yaw_hint), icp)
    if not result.converged:
        reason = "not_converged"
    elif result.inlier_count < cfg.inlier_gate:
        reason = "few_inliers"
    elif result.final_cost / result.inlier_count >= cfg.cost_gate:
        reason = "cost_gate"
    else:
        reason = "accepted"
    return LoopEvent(cand.query_scan, cand.match_scan, cand.descriptor_distance, cand.yaw_hint,
                     reason == "accepted", reason, result.pose if reason == "accepted" else None)


def verify_and_close(cand: LoopCandidate, clouds, graph: PoseGraph, icp: RegistrationConfig = None,
                     cfg: LoopConfig = None) -> Optional[Edge]:
    cfg = cfg or LoopConfig()
    event = verify(cand, clouds, icp, cfg)
    if not event.accepted:
        return None
    info = information_from_sigmas(cfg.loop_sigmas)
    graph.add_loop(cand.match_scan, cand.query_scan, event.relative_pose, info)
    return Edge(cand.match_scan, cand.query_scan, event.relative_pose, info, "loop")


# --- Pose-graph optimization ---

@dataclass
class OptimizationReport:
    success: bool
    iterations: int
    initial_cost: float
    final_cost: float
    message: str = ""
    poses: Dict[int, Pose2] = field(default_factory=dict)


def _edge_arrays(graph: PoseGraph, column: Dict[int, int]):
    edges = list(graph.edges())
    I = np.array([column[e.i] for e in edges], dtype=np.int64)
    J = np.array([column[e.j] for e in edges], dtype=np.int64)
    Z = np.array([e.measurement.to_array() for e in edges]).reshape(-1, 3)
    info = np.array([e.information for e in edges]).reshape(-1, 3)
    return I, J, Z, info


def _edge_errors(x: np.ndarray, I, J, Z):
    xi, xj = x[I], x[J]
    dx, dy = xj[:, 0] - xi[:, 0], xj[:, 1] - xi[:, 1]
    ci, si = np.cos(xi[:, 2]), np.sin(xi[:, 2])
    ax = ci * dx + si * dy
    ay = -si * dx + ci * dy
    cz, sz = np.cos(Z[:, 2]), np.sin(Z[:, 2])
    ex = cz * (ax - Z[:, 0]) + sz * (ay - Z[:, 1])
    ey = -sz * (ax - Z[:, 0]) + cz * (ay - Z[:, 1])
    et = wrap_angle(xj[:, 2] - xi[:, 2] - Z[:, 2])
    return np.column_stack([ex, ey, np.atleast_1d(et)]), ax, ay


def _robust_weights(errors: np.ndarray, info: np.ndarray, delta: float) -> np.ndarray:
    chi2 = np.sum(errors * errors * info, axis=1)
    if delta <= 0:
        return np.ones(len(errors))
    s = np.sqrt(chi2)
    return np.where(s <= delta, 1.0, delta / np.maximum(s, 1e-300))


def _graph_cost(errors: np.ndarray, info: np.ndarray, delta: float) -> float:
    chi2 = np.sum(errors * errors * info, axis=1)
    if delta <= 0:
        return float(np.sum(chi2))
    s = np.sqrt(chi2)
    return float(np.sum(np.where(s <= delta, chi2, 2.0 * delta * s - delta * delta)))


def graph_cost(graph: PoseGraph, cfg: LoopConfig = None) -> float:
    cfg = cfg or LoopConfig()
    nodes = graph.node_ids()
    column = {n: c for c, n in enumerate(nodes)}
    x = np.array([graph.pose(n).to_array() for n in nodes])
    I, J, Z, info = _edge_arrays(graph, column)
    if len(I) == 0:
        return 0.0
    errors, _, _ = _edge_errors(x, I, J, Z)
    return _graph_cost(errors, info, cfg.robust_delta)


def _normal_equations(x, I, J, Z, info, delta, n_nodes):
    errors, ax, ay = _edge_errors(x, I, J, Z)
    w = _robust_weights(errors, info, delta)[:, None] * info  # (E, 3) diagonal weights
    m = len(I)
    angle = x[I, 2] + Z[:, 2]
    c, s = np.cos(angle), np.sin(angle)
    cz, sz = np.cos(Z[:, 2]), np.sin(Z[:, 2])

    A = np.zeros((m, 3, 3))
    B = np.zeros((m, 3, 3))
    A[:, 0, 0], A[:, 0, 1], A[:, 1, 0], A[:, 1, 1] = -c, -s, s, -c
    A[:, 0, 2] = cz * ay - sz * ax
    A[:, 1, 2] = -sz * ay - cz * ax
    A[:, 2, 2] = -1.0
    B[:, 0, 0], B[:, 0, 1], B[:, 1, 0], B[:, 1, 1] = c, s, -s, c
    B[:, 2, 2] = 1.0

    At_W = np.transpose(A, (0, 2, 1)) * w[:, None, :]
    Bt_W = np.transpose(B, (0, 2, 1)) * w[:, None, :]
    blocks = {
        (0, 0): At_W @ A, (0, 1): At_W @ B,
        (1, 0): Bt_W @ A, (1, 1): Bt_W @ B,
    }
    node = (I, J)
    rows, cols, vals = [], [], []
    local = np.arange(3)
    for (a, b), block in blocks.items():
        r = 3 * node[a][:, None, None] + local[None, :, None]
        cc = 3 * node[b][:, None, None] + local[None, None, :]
        rows.append(np.broadcast_to(r, block.shape).ravel())
        cols.append(np.broadcast_to(cc, block.shape).ravel())
        vals.append(block.ravel())
    size = 3 * n_nodes
    H = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(size, size)).tocsc()

    g = np.zeros(size)
    gi = np.einsum("eij,ej->ei", At_W, errors)
    gj = np.einsum("eij,ej->ei", Bt_W, errors)
    np.add.at(g, (3 * I[:, None] + local).ravel(), gi.ravel())
    np.add.at(g, (3 * J[:, None] + local).ravel(), gj.ravel())
    return H, g, errors


def optimize(graph: PoseGraph, cfg: LoopConfig = None) -> OptimizationReport:
    """
    Gauss-Newton (Levenberg-damped on rejection) over all node poses with the
    first node held fixed. Poses are written back only on success.
    """
    cfg = cfg or LoopConfig()
    nodes = graph.node_ids()
    if not nodes:
        return OptimizationReport(False, 0, 0.0, 0.0, "empty graph")
    column = {n: c for c, n in enumerate(nodes)}
    x = np.array([graph.pose(n).to_array() for n in nodes])
    I, J, Z, info = _edge_arrays(graph, column)
    if len(nodes) == 1 or len(I) == 0:
        return OptimizationReport(True, 0, 0.0, 0.0, "nothing to optimize", graph.poses())

    errors, _, _ = _edge_errors(x, I, J, Z)
    cost = _graph_cost(errors, info, cfg.robust_delta)
    initial_cost = cost
    free = np.arange(3, 3 * len(nodes))
    damping = 0.0
    iterations = 0
    status = "max_iterations"
    for iterations in range(1, cfg.max_iterations + 1):
        H, g, _ = _normal_equations(x, I, J, Z, info, cfg.robust_delta, len(nodes))
        Hf = H[free][:, free]
        if damping > 0:
            Hf = Hf + damping * sp.diags(Hf.diagonal())
        try:
            step = -splu(Hf.tocsc()).solve(g[free])
        except RuntimeError as e:
            return OptimizationReport(False, iterations, initial_cost, cost, f"singular normal equations: {e}")
        if not np.all(np.isfinite(step)):
            return OptimizationReport(False, iterations, initial_cost, cost, "singular normal equations: non-finite step")

        trial = x.copy()
        trial[1:] += step.reshape(-1, 3)
        trial[:, 2] = wrap_angle(trial[:, 2])
        trial_errors, _, _ = _edge_errors(trial, I, J, Z)
        trial_cost = _graph_cost(trial_errors, info, cfg.robust_delta)
        if trial_cost <= cost:
            x, cost = trial, trial_cost
            damping = damping / 10.0 if damping > 1e-9 else 0.0
            if np.linalg.norm(step) < cfg.step_tolerance:
                status = "converged"
                break
        else:
            if np.linalg.norm(step) < cfg.step_tolerance:
                status = "converged"
                break
            damping = 1e-4 if damping == 0.0 else damping * 10.0
            if damping > 1e8:
                return OptimizationReport(False, iterations, initial_cost, cost, "damping limit reached")

    for n, row in zip(nodes, x):
        graph.set_pose(n, Pose2.from_array(row))
    return OptimizationReport(True, iterations, initial_cost, cost, status, graph.poses())


# --- Back-end worker ---

@dataclass(frozen=True)
class ScanSnapshot:
    """Immutable hand-off from tracking to the loop back-end."""

    scan_index: int
    odometry_pose: Pose2
    cloud: FeatureCloud  # motion-compensated surface cloud, sensor frame


@dataclass(frozen=True)
class BackendUpdate:
    scan_index: int
    events: Tuple[LoopEvent, ...]
    loops_total: int
    corrected_poses: Optional[Dict[int, Pose2]] = None


class LoopBackend:
    """Owns the loop-closing pose graph; processes snapshots strictly in submission order."""

    def __init__(self, cfg: LoopConfig = None, icp: RegistrationConfig = None):
        self.cfg = cfg or LoopConfig()
        self.icp = icp or RegistrationConfig()
        self.graph = PoseGraph()
        self.detector = LoopDetector(self.cfg)
        self.store = CloudStore(self.cfg.store_size)
        self.events: List[LoopEvent] = []
        self.reports: List[OptimizationReport] = []
        self._last_odometry: Optional[Pose2] = None
        self._last_scan: Optional[int] = None

    def process(self, snapshot: ScanSnapshot) -> BackendUpdate:
        k = snapshot.scan_index
        if self._last_scan is None:
            self.graph.add_node(k, snapshot.odometry_pose)
        else:
            relative = self._last_odometry.between(snapshot.odometry_pose)
            self.graph.add_node(k, self.graph.pose(self._last_scan).compose(relative))
            self.graph.add_odometry(self._last_scan, k, relative, information_from_sigmas(self.cfg.odometry_sigmas))
        self._last_scan, self._last_odometry = k, snapshot.odometry_pose
        self.store.put(k, snapshot.cloud)

        descriptor = describe(snapshot.cloud, self.cfg)
        events = []
        for cand in self.detector.match(descriptor, k)[: self.cfg.max_verifications]:
            event = verify(cand, self.store, self.icp, self.cfg)
            events.append(event)
            if event.accepted:
                self.graph.add_loop(cand.match_scan, k, event.relative_pose, information_from_sigmas(self.cfg.loop_sigmas))
                break
        self.detector.add(k, descriptor)
        self.events.extend(events)

        corrected = None
        if any(e.accepted for e in events):
            report = optimize(self.graph, self.cfg)
            self.reports.append(report)
            if report.success:
                corrected = report.poses
        return BackendUpdate(k, tuple(events), len(self.graph.loop_edges()), corrected)

    def corrected_trajectory(self) -> Dict[int, Pose2]:
        return self.graph.poses()
