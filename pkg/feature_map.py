"""
Global feature map with per-point hit statistics and the probability-based
feature filter.

Every map point carries R (matching rounds), H (hits) and P = H / R. Points that
are rarely matched after a grace period are evicted; points hit often enough
become permanent.
"""
import csv
from dataclasses import dataclass
from pathlib import Path
from typing import List, Literal

import numpy as np
from pydantic import BaseModel, Field

from scan_model import FeatureCloud, Point2
from spatial_index import KnnIndex


class FilterConfig(BaseModel):
    theta_p: float = Field(0.25, gt=0.0, lt=1.0, description="Hit-probability threshold for eviction")
    r_min: float = Field(10, gt=0, description="Grace period in matching rounds")
    h_max: float = Field(10, gt=0, description="Hit count that makes a point permanent")
    correspondence_k: int = Field(5, ge=1, description="Map points hit per source point")
    max_correspondence_dist: float = Field(3.0, gt=0.0, description="Hit gating radius in meters")
    merge_radius: float = Field(0.1, ge=0.0, description="Source points this close to a map point are re-observations")
    hit_counting: Literal["indicator", "per_source"] = Field(
        "indicator", description="indicator: at most one hit per point and scan; per_source: one hit per matching source point"
    )


@dataclass(frozen=True)
class MapPoint:
    uid: int
    position: Point2
    birth_scan: int
    R: float
    H: float
    P: float
    permanent: bool


@dataclass(frozen=True)
class HitRecord:
    """Outcome of matching one world-frame scan against the map."""

    scan_index: int
    neighbors: np.ndarray  # (n, k) map row indices within the gating radius, -1 otherwise
    init_R: np.ndarray
    init_H: np.ndarray
    merged: np.ndarray  # source points that re-observe an existing map point
    hit_counts: np.ndarray  # hits added per map row (aligned with the map at record time)
    hit_uids: dict  # uid -> hits this scan


class FeatureMap:
    """Single-writer feature map; readers on other threads should use snapshot()."""

    def __init__(self):
        self.xy = np.zeros((0, 2))
        self.t = np.zeros(0)
        self.intensity = np.zeros(0)
        self.uid = np.zeros(0, dtype=np.int64)
        self.birth = np.zeros(0, dtype=np.int64)
        self.R = np.zeros(0)
        self.H = np.zeros(0)
        self.P = np.zeros(0)
        self.permanent = np.zeros(0, dtype=bool)
        self.k = 0
        self._next_uid = 0
        self._index = KnnIndex(self.xy)

    def __len__(self) -> int:
        return len(self.xy)

    @property
    def index(self) -> KnnIndex:
        return self._index

    def _rebuild_index(self):
        self._index = KnnIndex(self.xy)

    def point(self, row: int) -> MapPoint:
        x, y = self.xy[row]
        return MapPoint(
            int(self.uid[row]),
            Point2(float(x), float(y), float(self.t[row]), float(self.intensity[row])),
            int(self.birth[row]),
            float(self.R[row]),
            float(self.H[row]),
            float(self.P[row]),
            bool(self.permanent[row]),
        )

    def points(self) -> List[MapPoint]:
        return [self.point(row) for row in range(len(self))]

    def knn(self, query: Point2, k: int) -> List[MapPoint]:
        """Exact k nearest map points; ties go to the earlier inserted point."""
        if len(self) == 0:
            raise ValueError("knn on an empty map")
        rows = self._index.nearest((query.x, query.y), min(k, len(self)))
        return [self.point(int(r)) for r in rows]

    def record_hits(self, cloud: FeatureCloud, scan_index: int, cfg: FilterConfig = None) -> HitRecord:
        """
        Match a registered (world-frame) scan against the map and add its hits.

        Initial statistics for new points are the averages over a full
        correspondence set, read before this scan's hits are added; points with
        fewer than k correspondences start at R = H = 1.
        """
        cfg = cfg or FilterConfig()
        if cloud.frame != "world":
            raise ValueError("record_hits expects a world-frame cloud")
        n, k = len(cloud), cfg.correspondence_k
        init_R = np.ones(n)
        init_H = np.ones(n)
        merged = np.zeros(n, dtype=bool)
        hit_counts = np.zeros(len(self))
        neighbors = np.full((n, k), -1, dtype=np.int64)
        if n == 0 or len(self) == 0:
            return HitRecord(scan_index, neighbors, init_R, init_H, merged, hit_counts, {})

        dist, idx = self._index.query(cloud.xy, k)
        within = (idx >= 0) & (dist <= cfg.max_correspondence_dist)
        neighbors = np.where(within, idx, -1)

        full = within.all(axis=1)
        if full.any():
            init_R[full] = self.R[idx[full]].mean(axis=1)
            init_H[full] = self.H[idx[full]].mean(axis=1)
        if cfg.merge_radius > 0:
            merged = within[:, 0] & (dist[:, 0] <= cfg.merge_radius)

        rows = neighbors[within]
        if cfg.hit_counting == "per_source":
            np.add.at(hit_counts, rows, 1.0)
        else:
            hit_counts[np.unique(rows)] = 1.0
        self.H = self.H + hit_counts
        hit_uids = {int(self.uid[r]): float(hit_counts[r]) for r in np.flatnonzero(hit_counts)}
        return HitRecord(scan_index, neighbors, init_R, init_H, merged, hit_counts, hit_uids)

    def update(self, cloud: FeatureCloud, hits: HitRecord, scan_index: int, cfg: FilterConfig = None,
               filter_enabled: bool = True) -> "FeatureMap":
        """
        Advance the map to the next scan: M <- M u S, then R/P bookkeeping and eviction.

        Existing points gain one matching round; inserted points keep their
        initial statistics. H is capped at R so P stays in [0, 1]. Eviction needs
        P < theta_p and R > r_min and H < h_max.
        """
        cfg = cfg or FilterConfig()
        self.R = self.R + 1.0

        fresh = ~hits.merged
        count = int(fresh.sum())
        if count:
            self.xy = np.vstack([self.xy, cloud.xy[fresh]])
            self.t = np.concatenate([self.t, cloud.t[fresh]])
            self.intensity = np.concatenate([self.intensity, cloud.intensity[fresh]])
            self.uid = np.concatenate([self.uid, np.arange(self._next_uid, self._next_uid + count)])
            self.birth = np.concatenate([self.birth, np.full(count, scan_index, dtype=np.int64)])
            self.R = np.concatenate([self.R, hits.init_R[fresh]])
            self.H = np.concatenate([self.H, hits.init_H[fresh]])
            self.permanent = np.concatenate([self.permanent, np.zeros(count, dtype=bool)])
            self._next_uid += count

        # per_source counting can add several hits in one round
        self.H = np.minimum(self.H, self.R)
        self.P = self.H / self.R
        self.permanent = self.permanent | (self.H >= cfg.h_max)
        if filter_enabled:
            evict = eviction_mask(self.P, self.R, self.H, cfg) & ~self.permanent
            if evict.any():
                self._keep_rows(~evict)
        self.k = scan_index + 1
        self._rebuild_index()
        return self

    def _keep_rows(self, keep: np.ndarray):
        for name in ("xy", "t", "intensity", "uid", "birth", "R", "H", "P", "permanent"):
            setattr(self, name, getattr(self, name)[keep])

    def snapshot(self) -> "FeatureMap":
        copy = FeatureMap.__new__(FeatureMap)
        for name in ("xy", "t", "intensity", "uid", "birth", "R", "H", "P", "permanent"):
            setattr(copy, name, getattr(self, name).copy())
        copy.k = self.k
        copy._next_uid = self._next_uid
        copy._index = self._index
        return copy

    def export_csv(self, path) -> Path:
        return write_map_csv(self.xy, self.R, self.H, self.P, self.birth, path)


def eviction_mask(P: np.ndarray, R: np.ndarray, H: np.ndarray, cfg: FilterConfig) -> np.ndarray:
    return (P < cfg.theta_p) & (R > cfg.r_min) & (H < cfg.h_max)


def record_hits(feature_map: FeatureMap, cloud: FeatureCloud, scan_index: int, cfg: FilterConfig = None) -> HitRecord:
    return feature_map.record_hits(cloud, scan_index, cfg)


def update(feature_map: FeatureMap, cloud: FeatureCloud, hits: HitRecord, scan_index: int,
           cfg: FilterConfig = None, filter_enabled: bool = True) -> FeatureMap:
    return feature_map.update(cloud, hits, scan_index, cfg, filter_enabled)


def write_map_csv(xy, R, H, P, birth, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["x", "y", "R", "H", "P", "birth_scan"])
        for (x, y), r, h, p, b in zip(xy, R, H, P, birth):
            writer.writerow([repr(float(x)), repr(float(y)), repr(float(r)), repr(float(h)), repr(float(p)), int(b)])
    return path


def read_map_csv(path) -> dict:
    """Columns of an exported map as numpy arrays."""
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    columns = {name: np.array([float(row[name]) if row[name] != "" else np.nan for row in rows])
               for name in ("x", "y", "R", "H", "P")}
    columns["birth_scan"] = np.array([int(row["birth_scan"]) for row in rows], dtype=np.int64)
    return columns
