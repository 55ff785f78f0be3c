"""Pinhole camera, drone/gimbal geometry and target projection.

Conventions
-----------
World frame is right-handed with z up. The camera frame is x-right, y-down,
z-forward (optical axis), so image coordinates follow ``u = u0 + f*X/Z`` and
``v = v0 + f*Y/Z``. Pixel centers sit at integer coordinates.

The gimbal is mechanically stabilized: only drone yaw and gimbal pitch enter
the camera orientation, roll is identically zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, NonPositiveDepth

MIN_DEPTH = 1e-6


def wrap_angle(a: float) -> float:
    """Normalize an angle to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


class ImagePoint(NamedTuple):
    u: float
    v: float


@dataclass(frozen=True)
class CameraIntrinsics:
    f: float
    u0: float
    v0: float
    width: int
    height: int

    def __post_init__(self):
        if not self.f > 0:
            raise ConfigError(f"focal length must be positive, got {self.f}")
        if not (0 <= self.u0 < self.width and 0 <= self.v0 < self.height):
            raise ConfigError("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, width: int = 640, height: int = 360, fov_deg: float = 69.0) -> "CameraIntrinsics":
        """Intrinsics from a horizontal field of view, principal point at the image center."""
        if not 0.0 < fov_deg < 180.0:
            raise ConfigError(f"fov_deg out of range: {fov_deg}")
        f = (width / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
        return cls(f=f, u0=width / 2.0, v0=height / 2.0, width=width, height=height)

    def matrix(self) -> np.ndarray:
        return np.array([[self.f, 0.0, self.u0], [0.0, self.f, self.v0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Pose:
    """Planar vehicle state; ``yaw`` is kept in (-pi, pi]."""

    x: float
    y: float
    z: float
    yaw: float

    def __post_init__(self):
        for name in ("x", "y", "z"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    def position(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    def forward(self) -> np.ndarray:
        return np.array([math.cos(self.yaw), math.sin(self.yaw), 0.0])

    def left(self) -> np.ndarray:
        return np.array([-math.sin(self.yaw), math.cos(self.yaw), 0.0])


@dataclass(frozen=True)
class GimbalConfig:
    pitch: float = math.radians(45.0)

    def __post_init__(self):
        if not 0.0 < self.pitch <= math.pi / 2 + 1e-12:
            raise ConfigError(f"gimbal pitch must be in (0, pi/2], got {self.pitch}")


@dataclass(frozen=True)
class CarModel:
    """Rectangular footprint of the target; the front edge lies along +front_axis."""

    length: float = 0.5
    width: float = 0.25
    front_axis: tuple = (1.0, 0.0)
    footprint: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.length > self.width > 0:
            raise ConfigError("car requires length > width > 0")
        a = np.asarray(self.front_axis, dtype=float)
        n = np.linalg.norm(a)
        if n == 0:
            raise ConfigError("front_axis must be nonzero")
        a = a / n
        object.__setattr__(self, "front_axis", (float(a[0]), float(a[1])))
        side = np.array([-a[1], a[0]])
        hl, hw = self.length / 2.0, self.width / 2.0
        # front-left, front-right, back-right, back-left in the car body frame
        fp = np.array([hl * a + hw * side, hl * a - hw * side, -hl * a - hw * side, -hl * a + hw * side])
        object.__setattr__(self, "footprint", fp)

    def world_corners(self, pose: Pose) -> np.ndarray:
        """(4, 3) footprint corners in world coordinates, order fl, fr, br, bl."""
        c, s = math.cos(pose.yaw), math.sin(pose.yaw)
        rot = np.array([[c, -s], [s, c]])
        xy = self.footprint @ rot.T + np.array([pose.x, pose.y])
        return np.column_stack([xy, np.full(4, pose.z)])

    def world_front_axis(self, pose: Pose) -> np.ndarray:
        c, s = math.cos(pose.yaw), math.sin(pose.yaw)
        a = self.front_axis
        return np.array([c * a[0] - s * a[1], s * a[0] + c * a[1], 0.0])


@dataclass(frozen=True)
class CameraExtrinsics:
    """World-to-camera rigid transform: ``p_cam = rotation @ p_world + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "CameraExtrinsics":
        rt = self.rotation.T
        return CameraExtrinsics(rt, -rt @ self.translation)

    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def apply(self, points_world) -> np.ndarray:
        p = np.asarray(points_world, dtype=float)
        return p @ self.rotation.T + self.translation


def camera_axes(yaw: float, pitch: float) -> np.ndarray:
    """Camera x/y/z axes expressed in world coordinates, as rows."""
    fwd = np.array([math.cos(yaw), math.sin(yaw), 0.0])
    right = np.array([math.sin(yaw), -math.cos(yaw), 0.0])
    up = np.array([0.0, 0.0, 1.0])
    z_c = math.cos(pitch) * fwd - math.sin(pitch) * up
    y_c = np.cross(z_c, right)
    return np.vstack([right, y_c, z_c])


def camera_from_pose(drone: Pose, gimbal: GimbalConfig) -> CameraExtrinsics:
    rot = camera_axes(drone.yaw, gimbal.pitch)
    return CameraExtrinsics(rot, -rot @ drone.position())


def _to_camera(point_world, extr: CameraExtrinsics) -> np.ndarray:
    pc = extr.apply(point_world)
    if np.any(pc[..., 2] <= MIN_DEPTH):
        raise NonPositiveDepth(f"camera-frame depth {np.min(pc[..., 2]):.3g} m is not positive")
    return pc


def depth_of(point_world, extr: CameraExtrinsics):
    return _to_camera(point_world, extr)[..., 2]


def project(point_world, extr: CameraExtrinsics, intr: CameraIntrinsics) -> ImagePoint:
    X, Y, Z = _to_camera(point_world, extr)
    return ImagePoint(intr.u0 + intr.f * X / Z, intr.v0 + intr.f * Y / Z)


def project_many(points_world, extr: CameraExtrinsics, intr: CameraIntrinsics) -> np.ndarray:
    """Vectorized ``project`` for an (n, 3) array; returns (n, 2) pixel coordinates."""
    pc = _to_camera(points_world, extr)
    return np.column_stack([intr.u0 + intr.f * pc[:, 0] / pc[:, 2], intr.v0 + intr.f * pc[:, 1] / pc[:, 2]])


def pixel_ray(uv, intr: CameraIntrinsics) -> np.ndarray:
    """Camera-frame ray directions with unit z for pixel coordinates (n, 2)."""
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    return np.column_stack([(uv[:, 0] - intr.u0) / intr.f, (uv[:, 1] - intr.v0) / intr.f, np.ones(len(uv))])


def backproject(uv, depth, extr: CameraExtrinsics, intr: CameraIntrinsics) -> np.ndarray:
    """World points at the given camera-frame depths along the pixel rays."""
    pc = pixel_ray(uv, intr) * np.asarray(depth, dtype=float).reshape(-1, 1)
    inv = extr.inverse()
    return inv.apply(pc)


def ground_depths(uv, extr: CameraExtrinsics, intr: CameraIntrinsics, ground_z: float = 0.0) -> np.ndarray:
    """Camera-frame depth where each pixel ray meets the plane ``z = ground_z``.

    Raises NonPositiveDepth when a ray does not hit the plane in front of the camera.
    """
    rays_cam = pixel_ray(uv, intr)
    rays_world = rays_cam @ extr.rotation  # R^T applied row-wise
    center = extr.center()
    dz = rays_world[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = (ground_z - center[2]) / dz
    if np.any(~np.isfinite(depth)) or np.any(depth <= MIN_DEPTH):
        raise NonPositiveDepth("pixel ray does not intersect the ground in front of the camera")
    return depth
