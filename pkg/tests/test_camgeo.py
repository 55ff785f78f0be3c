import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nser_ibvs.camgeo import (
    CameraIntrinsics,
    CarModel,
    GimbalConfig,
    Pose,
    backproject,
    camera_axes,
    camera_from_pose,
    depth_of,
    ground_depths,
    project,
    project_many,
    wrap_angle,
)
from nser_ibvs.errors import ConfigError, NonPositiveDepth

INTR = CameraIntrinsics.from_fov(640, 360, 69.0)
GIMBAL = GimbalConfig(math.radians(45.0))

angles = st.floats(-10.0, 10.0, allow_nan=False)
coords = st.floats(-5.0, 5.0, allow_nan=False)


def test_intrinsics_from_fov():
    assert INTR.f == pytest.approx(320.0 / math.tan(math.radians(34.5)))
    assert (INTR.u0, INTR.v0) == (320.0, 180.0)


@pytest.mark.parametrize("kw", [dict(f=0.0, u0=1, v0=1, width=4, height=4), dict(f=1.0, u0=5, v0=1, width=4, height=4)])
def test_intrinsics_rejects_bad_values(kw):
    with pytest.raises(ConfigError):
        CameraIntrinsics(**kw)


def test_point_ahead_and_below_hits_principal_point():
    extr = camera_from_pose(Pose(0, 0, 0, 0), GIMBAL)
    u, v = project([1.0, 0.0, -1.0], extr, INTR)
    assert u == pytest.approx(INTR.u0, abs=1e-9)
    assert v == pytest.approx(INTR.v0, abs=1e-9)
    assert depth_of(np.array([1.0, 0.0, -1.0]), extr) == pytest.approx(math.sqrt(2.0))


def test_projection_matches_hand_oracle():
    # build the point in the camera frame, then map it back to the world
    extr = camera_from_pose(Pose(0.3, -0.2, 1.5, 0.7), GIMBAL)
    pc = np.array([0.4, -0.1, 2.0])
    pw = extr.inverse().apply(pc)
    u, v = project(pw, extr, INTR)
    assert u == pytest.approx(INTR.u0 + INTR.f * 0.2, abs=1e-9)
    assert v == pytest.approx(INTR.v0 - INTR.f * 0.05, abs=1e-9)


def test_point_behind_camera_raises():
    extr = camera_from_pose(Pose(0, 0, 0, 0), GIMBAL)
    with pytest.raises(NonPositiveDepth):
        project([-1.0, 0.0, 1.0], extr, INTR)


@given(angles, st.floats(0.05, math.pi / 2))
def test_camera_axes_orthonormal_no_roll(yaw, pitch):
    r = camera_axes(yaw, pitch)
    assert np.allclose(r @ r.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(r) == pytest.approx(1.0)
    assert abs(r[0, 2]) < 1e-12  # camera x axis stays horizontal


@given(coords, coords, angles, angles, st.floats(0.5, 3.0), st.floats(-1.0, 1.0))
def test_yaw_equivariance(x, y, yaw, dyaw, fwd, side):
    """Rotating drone and point together about the drone's vertical axis leaves the pixel unchanged."""
    drone = Pose(x, y, 1.8, yaw)
    d = np.array([fwd, side, -1.8])
    c, s = math.cos(yaw), math.sin(yaw)
    p = drone.position() + np.array([c * d[0] - s * d[1], s * d[0] + c * d[1], d[2]])
    uv1 = project(p, camera_from_pose(drone, GIMBAL), INTR)
    drone2 = Pose(x, y, 1.8, yaw + dyaw)
    c2, s2 = math.cos(dyaw), math.sin(dyaw)
    rel = p - drone.position()
    p2 = drone.position() + np.array([c2 * rel[0] - s2 * rel[1], s2 * rel[0] + c2 * rel[1], rel[2]])
    uv2 = project(p2, camera_from_pose(drone2, GIMBAL), INTR)
    assert np.allclose(uv1, uv2, atol=1e-7)


@given(st.lists(st.tuples(st.floats(0, 639), st.floats(200, 359)), min_size=1, max_size=8), st.floats(1.0, 3.0))
def test_ground_depths_backproject_onto_plane(uvs, alt):
    extr = camera_from_pose(Pose(0.0, 0.0, alt, 0.3), GIMBAL)
    uv = np.array(uvs)
    depth = ground_depths(uv, extr, INTR)
    pw = backproject(uv, depth, extr, INTR)
    assert np.allclose(pw[:, 2], 0.0, atol=1e-9)
    assert np.allclose(project_many(pw, extr, INTR), uv, atol=1e-7)


def test_ground_depth_above_horizon_raises():
    extr = camera_from_pose(Pose(0, 0, 1.8, 0), GimbalConfig(math.radians(10.0)))
    with pytest.raises(NonPositiveDepth):
        ground_depths([[320.0, 0.0]], extr, INTR)


def test_extrinsics_inverse_roundtrip(rng):
    extr = camera_from_pose(Pose(1.0, 2.0, 1.5, 2.0), GIMBAL)
    assert np.allclose(extr.matrix() @ extr.inverse().matrix(), np.eye(4), atol=1e-12)
    assert np.allclose(extr.center(), [1.0, 2.0, 1.5])


@given(st.floats(-1e3, 1e3, allow_nan=False))
def test_wrap_angle_range(a):
    w = wrap_angle(a)
    assert -math.pi < w <= math.pi
    assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-9)
    assert math.isclose(math.sin(w), math.sin(a), abs_tol=1e-9)


def test_wrap_angle_boundary():
    assert wrap_angle(math.pi) == pytest.approx(math.pi)
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)


def test_car_corners_order_and_size():
    car = CarModel(0.5, 0.25)
    c = car.world_corners(Pose(1.0, 0.0, 0.0, math.pi / 2))
    # front of a car yawed +90 deg points along +y; fl is on its left (-x side)
    assert np.allclose(c[0], [0.875, 0.25, 0.0])
    assert np.allclose(c[1], [1.125, 0.25, 0.0])
    assert np.linalg.norm(c[0] - c[3]) == pytest.approx(0.5)
    assert np.linalg.norm(c[0] - c[1]) == pytest.approx(0.25)


def test_car_model_validation():
    with pytest.raises(ConfigError):
        CarModel(0.2, 0.3)
    with pytest.raises(ConfigError):
        GimbalConfig(0.0)
