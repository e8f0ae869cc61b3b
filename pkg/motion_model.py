"""
Constant-velocity motion model: velocity estimation between scans, warm-start
prediction and per-point motion compensation to the scan start time.
"""
import math
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, Field

from scan_model import FeatureCloud, Pose2


class MotionConfig(BaseModel):
    compensation_enabled: bool = Field(True, description="Deskew feature points to the scan start time")
    refinements: int = Field(
        2, ge=0, description="Re-deskew and re-register passes using the velocity measured for the current scan"
    )


@dataclass(frozen=True)
class VelocityEstimate:
    """Twist expressed in the previous scan's frame."""

    v_x: float = 0.0
    v_y: float = 0.0
    omega: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.v_x, self.v_y, self.omega)):
            raise ValueError(f"non-finite velocity {self}")

    @classmethod
    def zero(cls) -> "VelocityEstimate":
        return cls(0.0, 0.0, 0.0)

    def rotated(self, angle: float) -> "VelocityEstimate":
        c, s = math.cos(angle), math.sin(angle)
        return VelocityEstimate(c * self.v_x - s * self.v_y, s * self.v_x + c * self.v_y, self.omega)


def estimate_velocity(T_prev: Pose2, T_curr: Pose2, dt: float) -> VelocityEstimate:
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    relative = T_prev.inverse().compose(T_curr)
    return VelocityEstimate(relative.x / dt, relative.y / dt, relative.yaw / dt)


def predict(vel: VelocityEstimate, dt: float) -> Pose2:
    """Relative motion over dt under the constant-velocity model (first-order)."""
    return Pose2(vel.v_x * dt, vel.v_y * dt, vel.omega * dt)


def compensate(cloud: FeatureCloud, vel: VelocityEstimate, t0: float) -> FeatureCloud:
    """Move every point to where it lies in the sensor frame at time t0."""
    if len(cloud) == 0:
        return cloud
    tau = cloud.t - t0
    yaw = vel.omega * tau
    c, s = np.cos(yaw), np.sin(yaw)
    x, y = cloud.xy[:, 0], cloud.xy[:, 1]
    xy = np.column_stack([c * x - s * y + vel.v_x * tau, s * x + c * y + vel.v_y * tau])
    return cloud.with_xy(xy)


class MotionCompensator:
    def deskew(self, cloud: FeatureCloud, vel: VelocityEstimate, t0: float) -> FeatureCloud:
        return compensate(cloud, vel, t0)


class StubCompensator:
    def deskew(self, cloud: FeatureCloud, vel: VelocityEstimate, t0: float) -> FeatureCloud:
        return cloud


def get_motion_compensator(config: MotionConfig):
    return MotionCompensator() if config.compensation_enabled else StubCompensator()
