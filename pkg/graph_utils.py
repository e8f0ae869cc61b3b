"""
Utility functions for pose-graph construction, statistics and visualization.
"""
import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Tuple

import networkx as nx
import numpy as np
from pyvis.network import Network

from scan_model import Pose2

ODOMETRY = "odometry"
LOOP = "loop"


def information_from_sigmas(sigmas) -> np.ndarray:
    """Diagonal information weights 1 / sigma^2 for (x, y, yaw)."""
    sigmas = np.asarray(sigmas, dtype=np.float64)
    return 1.0 / sigmas**2


@dataclass(frozen=True)
class Edge:
    i: int
    j: int
    measurement: Pose2
    information: np.ndarray  # diagonal weights, shape (3,)
    kind: str


class PoseGraph:
    """Pose per scan plus odometry and loop constraints, stored in a networkx MultiDiGraph."""

    def __init__(self):
        self.graph = nx.MultiDiGraph()

    def __len__(self) -> int:
        return self.graph.number_of_nodes()

    def add_node(self, scan_index: int, pose: Pose2):
        self.graph.add_node(int(scan_index), pose=pose)

    def has_node(self, scan_index: int) -> bool:
        return self.graph.has_node(int(scan_index))

    def pose(self, scan_index: int) -> Pose2:
        return self.graph.nodes[int(scan_index)]["pose"]

    def set_pose(self, scan_index: int, pose: Pose2):
        self.graph.nodes[int(scan_index)]["pose"] = pose

    def node_ids(self) -> List[int]:
        return sorted(self.graph.nodes)

    def poses(self) -> Dict[int, Pose2]:
        return {n: self.pose(n) for n in self.node_ids()}

    def add_edge(self, i: int, j: int, measurement: Pose2, information, kind: str = ODOMETRY):
        if not measurement.is_finite():
            raise ValueError(f"non-finite edge measurement {measurement}")
        for n in (i, j):
            if not self.has_node(n):
                raise KeyError(f"edge references unknown node {n}")
        info = np.asarray(information, dtype=np.float64).reshape(3)
        self.graph.add_edge(int(i), int(j), measurement=measurement, information=info, kind=kind)

    def add_odometry(self, i: int, j: int, measurement: Pose2, information):
        self.add_edge(i, j, measurement, information, ODOMETRY)

    def add_loop(self, i: int, j: int, measurement: Pose2, information):
        self.add_edge(i, j, measurement, information, LOOP)

    def edges(self) -> Iterator[Edge]:
        for i, j, data in sorted(self.graph.edges(data=True), key=lambda e: (e[0], e[1], e[2]["kind"])):
            yield Edge(i, j, data["measurement"], data["information"], data["kind"])

    def loop_edges(self) -> List[Edge]:
        return [e for e in self.edges() if e.kind == LOOP]

    def is_connected(self) -> bool:
        return len(self) > 0 and nx.is_weakly_connected(self.graph)

    def copy(self) -> "PoseGraph":
        clone = PoseGraph()
        clone.graph = self.graph.copy()
        return clone


def get_graph_stats(pose_graph: PoseGraph) -> dict:
    """Node / edge counts by kind."""
    kinds = [data["kind"] for _, _, data in pose_graph.graph.edges(data=True)]
    return {
        "nodes": len(pose_graph),
        "odometry_edges": kinds.count(ODOMETRY),
        "loop_edges": kinds.count(LOOP),
        "connected": pose_graph.is_connected(),
    }


def write_graph_csv(pose_graph: PoseGraph, nodes_path, edges_path) -> Tuple[Path, Path]:
    nodes_path, edges_path = Path(nodes_path), Path(edges_path)
    with open(nodes_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["scan_index", "x", "y", "yaw"])
        for n, pose in pose_graph.poses().items():
            writer.writerow([n, repr(pose.x), repr(pose.y), repr(pose.yaw)])
    with open(edges_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["i", "j", "kind", "x", "y", "yaw", "info_x", "info_y", "info_yaw"])
        for e in pose_graph.edges():
            m = e.measurement
            writer.writerow([e.i, e.j, e.kind, repr(m.x), repr(m.y), repr(m.yaw), *(repr(float(v)) for v in e.information)])
    return nodes_path, edges_path


def read_graph_csv(nodes_path, edges_path) -> PoseGraph:
    pose_graph = PoseGraph()
    with open(nodes_path, newline="") as f:
        for row in csv.DictReader(f):
            pose_graph.add_node(int(row["scan_index"]), Pose2(float(row["x"]), float(row["y"]), float(row["yaw"])))
    with open(edges_path, newline="") as f:
        for row in csv.DictReader(f):
            measurement = Pose2(float(row["x"]), float(row["y"]), float(row["yaw"]))
            info = [float(row[c]) for c in ("info_x", "info_y", "info_yaw")]
            pose_graph.add_edge(int(row["i"]), int(row["j"]), measurement, info, row["kind"])
    return pose_graph


def visualize_pose_graph_pyvis(pose_graph: PoseGraph, output_path: str = "pose_graph.html",
                               height: str = "800px", width: str = "100%", every: int = 1) -> str:
    """Interactive HTML view of the pose graph with nodes pinned at their (x, y) positions."""
    net = Network(height=height, width=width, directed=True, bgcolor="#222222", font_color="white")
    nodes = pose_graph.node_ids()
    loops = pose_graph.loop_edges()
    keep = {n for n in nodes[::max(every, 1)]} | {nodes[-1]} if nodes else set()
    keep |= {e.i for e in loops} | {e.j for e in loops}
    shown = [n for n in nodes if n in keep]
    for n in shown:
        pose = pose_graph.pose(n)
        # pyvis y grows downwards
        net.add_node(n, label=str(n), x=pose.x * 20.0, y=-pose.y * 20.0, physics=False,
                     color="#97c2fc", size=6, title=f"scan {n}: ({pose.x:.2f}, {pose.y:.2f}, {pose.yaw:.3f})")

    for a, b in zip(shown, shown[1:]):
        net.add_edge(a, b, color="#848484", width=1, title=ODOMETRY)
    for e in loops:
        net.add_edge(e.i, e.j, color="#FF4B4B", width=3, title=LOOP)

    net.toggle_physics(False)
    net.save_graph(output_path)
    return output_path
