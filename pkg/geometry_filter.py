"""
Geometry-based surface feature selection.

A point is a surface feature when the covariance of its m nearest neighbours is
strongly one-dimensional (high local linearity) and the neighbourhood is compact
(radius below d_max).
"""
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
from pydantic import BaseModel, Field

from scan_model import FeatureCloud, Point2
from spatial_index import KnnIndex


class GeometryConfig(BaseModel):
    m: int = Field(10, ge=3, description="Neighbours per point")
    d_max: float = Field(2.0, gt=0.0, description="Maximum neighbourhood radius in meters")
    theta_min: float = Field(0.9, ge=0.0, lt=1.0, description="Linearity lower bound (strict)")


@dataclass(frozen=True)
class NeighborhoodPCA:
    """Batched closed-form PCA of 2-D neighbourhoods; every field has one entry per neighbourhood."""

    centroid: np.ndarray  # (n, 2)
    lambda1: np.ndarray
    lambda2: np.ndarray
    direction: np.ndarray  # (n, 2), unit principal direction

    @property
    def linearity(self) -> np.ndarray:
        theta = np.zeros_like(self.lambda1)
        positive = self.lambda1 > 0.0
        theta[positive] = (self.lambda1[positive] - self.lambda2[positive]) / self.lambda1[positive]
        return np.clip(theta, 0.0, 1.0)


def neighborhood_pca(neighborhoods: np.ndarray) -> NeighborhoodPCA:
    """
    PCA of (n, k, 2) neighbourhoods with covariance normalised by 1/k.

    Sums run sequentially over the k axis so a neighbourhood gives the same bits
    whether it is evaluated alone or inside a batch.
    """
    nbhd = np.asarray(neighborhoods, dtype=np.float64)
    k = nbhd.shape[1]
    total = nbhd[:, 0, :].copy()
    for j in range(1, k):
        total = total + nbhd[:, j, :]
    centroid = total / k

    dx = nbhd[:, :, 0] - centroid[:, None, 0]
    dy = nbhd[:, :, 1] - centroid[:, None, 1]
    sxx, sxy, syy = dx[:, 0] * dx[:, 0], dx[:, 0] * dy[:, 0], dy[:, 0] * dy[:, 0]
    for j in range(1, k):
        sxx = sxx + dx[:, j] * dx[:, j]
        sxy = sxy + dx[:, j] * dy[:, j]
        syy = syy + dy[:, j] * dy[:, j]
    a, b, c = sxx / k, sxy / k, syy / k

    half_trace = 0.5 * (a + c)
    spread = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    lambda1 = half_trace + spread
    lambda2 = np.maximum(half_trace - spread, 0.0)
    phi = 0.5 * np.arctan2(2.0 * b, a - c)
    direction = np.column_stack([np.cos(phi), np.sin(phi)])
    return NeighborhoodPCA(centroid, lambda1, lambda2, direction)


def _as_xy(neighborhood: Union[np.ndarray, Sequence[Point2]]) -> np.ndarray:
    if len(neighborhood) and isinstance(neighborhood[0], Point2):
        return np.array([(p.x, p.y) for p in neighborhood], dtype=np.float64)
    return np.asarray(neighborhood, dtype=np.float64).reshape(-1, 2)


def local_linearity(neighborhood: Union[np.ndarray, Sequence[Point2]]) -> float:
    """(lambda1 - lambda2) / lambda1 of the neighbourhood covariance; 0 when all points coincide."""
    xy = _as_xy(neighborhood)
    if len(xy) < 2:
        raise ValueError("local linearity needs at least 2 points")
    return float(neighborhood_pca(xy[None]).linearity[0])


@dataclass(frozen=True)
class SurfaceDecision:
    keep: np.ndarray  # bool per input point
    linearity: np.ndarray
    radius: np.ndarray
    neighbors: np.ndarray  # (n, m) indices, -1 when missing


def surface_mask(cloud: FeatureCloud, cfg: GeometryConfig = None) -> SurfaceDecision:
    cfg = cfg or GeometryConfig()
    n = len(cloud)
    if n < cfg.m + 1:
        return SurfaceDecision(
            np.zeros(n, dtype=bool), np.zeros(n), np.full(n, np.inf), np.full((n, cfg.m), -1, dtype=np.int64)
        )
    index = KnnIndex(cloud.xy)
    dist, neighbors = index.query(cloud.xy, cfg.m, exclude_self=True)
    radius = dist.max(axis=1)
    # canonical neighbour order keeps the covariance independent of search order
    ordered = np.sort(neighbors, axis=1)
    theta = neighborhood_pca(cloud.xy[ordered]).linearity
    keep = (theta > cfg.theta_min) & (radius < cfg.d_max)
    return SurfaceDecision(keep, theta, radius, neighbors)


def filter_surface(cloud: FeatureCloud, cfg: GeometryConfig = None) -> FeatureCloud:
    """Surface features of a cloud, in input order."""
    return cloud.subset(surface_mask(cloud, cfg).keep)
