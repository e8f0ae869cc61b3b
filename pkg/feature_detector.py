"""
Per-azimuth feature detector: continuous high-intensity, low-gradient runs of
power bins, each reduced to its midpoint.
"""
import numpy as np
from pydantic import BaseModel, Field

from scan_model import FeatureCloud, PolarScan


class DetectorConfig(BaseModel):
    intensity_threshold: float = Field(0.35, gt=0.0, lt=1.0, description="Minimum power of a run bin")
    gradient_threshold: float = Field(0.15, gt=0.0, description="Maximum absolute power change per bin inside a run")
    min_run_bins: int = Field(2, ge=1, description="Shortest run that yields a feature")
    max_features_per_azimuth: int = Field(4, ge=1, description="Runs kept per azimuth, strongest first")


def run_mask(power: np.ndarray, cfg: DetectorConfig) -> np.ndarray:
    """Bins that pass both the intensity and the gradient test."""
    power = np.asarray(power, dtype=np.float64)
    gradient = np.empty_like(power)
    gradient[:, :-1] = power[:, 1:] - power[:, :-1]
    gradient[:, -1] = power[:, -1] - power[:, -2]
    return (power >= cfg.intensity_threshold) & (np.abs(gradient) <= cfg.gradient_threshold)


def detect(scan: PolarScan, cfg: DetectorConfig = None) -> FeatureCloud:
    cfg = cfg or DetectorConfig()
    power = np.asarray(scan.power, dtype=np.float64)
    azimuths, bins = power.shape
    marked = run_mask(power, cfg)

    padded = np.zeros((azimuths, bins + 2), dtype=np.int8)
    padded[:, 1:-1] = marked
    edges = np.diff(padded, axis=1)
    start_rows, start_bins = np.nonzero(edges == 1)
    _, stop_bins = np.nonzero(edges == -1)  # exclusive; row-major order pairs them with starts
    lengths = stop_bins - start_bins
    long_enough = lengths >= cfg.min_run_bins
    rows, starts, stops = start_rows[long_enough], start_bins[long_enough], stop_bins[long_enough]
    if len(rows) == 0:
        return FeatureCloud.empty(scan.scan_index)

    flat = power.reshape(-1)
    peaks = np.array([flat[r * bins + a: r * bins + b].max() for r, a, b in zip(rows, starts, stops)])

    # strongest runs first within each azimuth; ties go to the smaller bin
    order = np.lexsort((starts, -peaks, rows))
    rows, starts, stops, peaks = rows[order], starts[order], stops[order], peaks[order]
    first_of_row = np.r_[True, rows[1:] != rows[:-1]]
    group_start = np.maximum.accumulate(np.where(first_of_row, np.arange(len(rows)), 0))
    rank = np.arange(len(rows)) - group_start
    kept = rank < cfg.max_features_per_azimuth
    rows, starts, stops, peaks = rows[kept], starts[kept], stops[kept], peaks[kept]

    output_order = np.lexsort((starts, rows))
    rows, starts, stops, peaks = rows[output_order], starts[output_order], stops[output_order], peaks[output_order]

    # even-length runs take the upper of the two middle bins
    mid_bins = (starts + stops) // 2
    ranges = (mid_bins + 0.5) * scan.range_resolution
    angles = scan.azimuth_angles[rows]
    xy = np.column_stack([ranges * np.cos(angles), ranges * np.sin(angles)])
    return FeatureCloud(scan.scan_index, xy, scan.azimuth_timestamps[rows], peaks, "sensor")
