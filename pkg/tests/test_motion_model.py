import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from motion_model import (
    MotionCompensator,
    MotionConfig,
    StubCompensator,
    VelocityEstimate,
    compensate,
    estimate_velocity,
    get_motion_compensator,
    predict,
)
from scan_model import FeatureCloud, Pose2


def test_identical_poses_give_zero_velocity():
    p = Pose2(3.0, -2.0, 0.4)
    v = estimate_velocity(p, p, 0.25)
    assert (v.v_x, v.v_y, v.omega) == pytest.approx((0.0, 0.0, 0.0), abs=1e-12)


def test_linear_velocity():
    v = estimate_velocity(Pose2(), Pose2(1.0, 0.0, 0.0), 0.25)
    assert v.v_x == pytest.approx(4.0)
    assert v.v_y == 0.0 and v.omega == 0.0


def test_angular_velocity():
    v = estimate_velocity(Pose2(), Pose2(0.0, 0.0, math.pi / 2), 0.25)
    assert v.omega == pytest.approx(2 * math.pi)


def test_velocity_is_expressed_in_the_previous_frame():
    v = estimate_velocity(Pose2(5.0, 5.0, math.pi / 2), Pose2(5.0, 6.0, math.pi / 2), 0.5)
    assert (v.v_x, v.v_y) == pytest.approx((2.0, 0.0))


@pytest.mark.parametrize("dt", [0.0, -0.25])
def test_non_positive_dt_is_rejected(dt):
    with pytest.raises(ValueError):
        estimate_velocity(Pose2(), Pose2(1, 0, 0), dt)


def test_predict_scales_the_twist():
    assert_allclose(predict(VelocityEstimate(4.0, 0.0, 2.0), 0.25).to_array(), [1.0, 0.0, 0.5])


class TestCompensate:
    def test_zero_velocity_is_identity(self, rng):
        xy = rng.uniform(-10, 10, size=(30, 2))
        cloud = FeatureCloud(0, xy, rng.uniform(0, 0.25, 30), np.ones(30))
        out = compensate(cloud, VelocityEstimate.zero(), 0.0)
        assert out.xy.tobytes() == cloud.xy.tobytes()
        assert out.t.tobytes() == cloud.t.tobytes()

    def test_pure_translation(self):
        cloud = FeatureCloud(0, [[5.0, 0.0]], [1.1], [1.0])
        out = compensate(cloud, VelocityEstimate(1.0, 0.0, 0.0), 1.0)
        assert_allclose(out.xy, [[5.1, 0.0]], atol=1e-12)

    def test_half_turn(self):
        cloud = FeatureCloud(0, [[1.0, 0.0]], [0.5], [1.0])
        out = compensate(cloud, VelocityEstimate(0.0, 0.0, 2 * math.pi), 0.0)
        assert_allclose(out.xy, [[-1.0, 0.0]], atol=1e-9)

    def test_quarter_turn_matches_rotation_matrix(self):
        cloud = FeatureCloud(0, [[1.0, 0.0]], [0.5], [1.0])
        out = compensate(cloud, VelocityEstimate(0.0, 0.0, math.pi), 0.0)
        expected = Pose2(0.0, 0.0, math.pi / 2).rotation() @ np.array([1.0, 0.0])
        assert_allclose(out.xy[0], expected, atol=1e-9)

    def test_points_at_scan_start_do_not_move(self):
        cloud = FeatureCloud(0, [[2.0, 3.0], [4.0, 1.0]], [7.0, 7.1], [1.0, 1.0])
        out = compensate(cloud, VelocityEstimate(3.0, -1.0, 0.8), 7.0)
        assert out.xy[0].tolist() == [2.0, 3.0]
        assert out.xy[1].tolist() != [4.0, 1.0]

    def test_equivariant_under_rotation(self, rng):
        xy = rng.uniform(-20, 20, size=(40, 2))
        t = rng.uniform(0.0, 0.25, 40)
        vel = VelocityEstimate(2.0, -0.5, 0.6)
        R = Pose2(0.0, 0.0, 0.9)
        cloud = FeatureCloud(0, xy, t, np.ones(40))
        rotated_first = compensate(cloud.with_xy(R.transform_xy(xy)), vel.rotated(0.9), 0.0)
        rotated_after = R.transform_xy(compensate(cloud, vel, 0.0).xy)
        assert_allclose(rotated_first.xy, rotated_after, atol=1e-9)


def test_compensator_selection():
    assert isinstance(get_motion_compensator(MotionConfig()), MotionCompensator)
    stub = get_motion_compensator(MotionConfig(compensation_enabled=False))
    assert isinstance(stub, StubCompensator)
    cloud = FeatureCloud(0, [[1.0, 0.0]], [0.2], [1.0])
    assert stub.deskew(cloud, VelocityEstimate(5.0, 0.0, 1.0), 0.0) is cloud
