"""
Exact k-nearest-neighbour search over 2-D points.

Thin wrapper around scipy's cKDTree that makes results deterministic: neighbours
are ordered by (distance, point index), and distance ties that straddle the k-th
slot are resolved with a radius query instead of being left to the tree.
"""
from typing import Tuple

import numpy as np
from scipy.spatial import cKDTree

TIE_RTOL = 1e-12
TIE_ATOL = 1e-12


class KnnIndex:
    """Read-only spatial index; build a new one when the point set changes."""

    def __init__(self, xy: np.ndarray):
        xy = np.array(xy, dtype=np.float64).reshape(-1, 2)
        xy.setflags(write=False)
        self.xy = xy
        self._tree = cKDTree(xy) if len(xy) else None

    def __len__(self) -> int:
        return len(self.xy)

    def _distances(self, query: np.ndarray, idx: np.ndarray) -> np.ndarray:
        """Euclidean distances from query rows to indexed points; -1 slots are inf."""
        safe = np.where(idx >= 0, idx, 0)
        d = np.sqrt(((self.xy[safe] - query[..., None, :]) ** 2).sum(axis=-1))
        return np.where(idx >= 0, d, np.inf)

    def query(self, queries: np.ndarray, k: int, exclude_self: bool = False) -> Tuple[np.ndarray, np.ndarray]:
        """
        k nearest indexed points for every query row.

        Returns (dist, idx) of shape (Q, k); missing slots hold inf / -1. With
        exclude_self the queries must be the indexed points themselves and row r
        never returns point r. Distances are recomputed from the coordinates so
        ordering and tie detection use one arithmetic.
        """
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 2)
        nq, n = len(queries), len(self.xy)
        dist = np.full((nq, k), np.inf)
        idx = np.full((nq, k), -1, dtype=np.int64)
        if n == 0 or nq == 0 or k <= 0:
            return dist, idx
        if exclude_self and nq != n:
            raise ValueError("exclude_self needs the indexed points as queries")

        fetch = min(k + (1 if exclude_self else 0) + 1, n)
        _, i = self._tree.query(queries, k=fetch)
        i = np.asarray(i, dtype=np.int64).reshape(nq, fetch)
        if exclude_self:
            i = np.where(i == np.arange(nq)[:, None], -1, i)
        d = self._distances(queries, i)
        order = np.lexsort((i, d), axis=-1)
        d = np.take_along_axis(d, order, axis=1)
        i = np.take_along_axis(i, order, axis=1)

        keep = min(k, fetch)
        dist[:, :keep] = d[:, :keep]
        idx[:, :keep] = i[:, :keep]
        idx[~np.isfinite(dist)] = -1

        # A truncated fetch can hide further candidates at (or within rounding of) the k-th distance.
        if fetch == k + (1 if exclude_self else 0) + 1:
            edge = d[:, k - 1]
            tied = np.isfinite(edge) & (d[:, k] <= edge * (1.0 + TIE_RTOL) + TIE_ATOL)
            for row in np.flatnonzero(tied):
                dist[row], idx[row] = self._resolve_ties(queries[row], edge[row], k, row if exclude_self else -1)
        return dist, idx

    def _resolve_ties(self, query: np.ndarray, radius: float, k: int, own: int):
        reach = radius * (1.0 + TIE_RTOL) + TIE_ATOL
        candidates = np.asarray(self._tree.query_ball_point(query, reach), dtype=np.int64)
        if own >= 0:
            candidates = candidates[candidates != own]
        d = self._distances(query, candidates)
        order = np.lexsort((candidates, d))[:k]
        dist = np.full(k, np.inf)
        idx = np.full(k, -1, dtype=np.int64)
        dist[: len(order)] = d[order]
        idx[: len(order)] = candidates[order]
        return dist, idx

    def nearest(self, query, k: int = 1) -> np.ndarray:
        """Indices of the k nearest points to a single query (fewer if the index is small)."""
        _, idx = self.query(np.asarray(query, dtype=np.float64).reshape(1, 2), k)
        return idx[0][idx[0] >= 0]
