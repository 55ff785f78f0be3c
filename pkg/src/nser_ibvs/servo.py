"""Reduced image-based visual servoing controller.

The controller works on four point features. Each point contributes a 2x3
block of the reduced interaction matrix, the blocks are stacked into an 8x3
matrix, and the camera twist ``(v_x, v_y, w_z)`` is the least-squares
solution ``-lambda * pinv(L) @ (s - s*)``.

The camera twist is then mapped to drone body commands (forward, left, yaw
rate) with a fixed 3x3 matrix, scaled into dimensionless actuator units,
clamped and optionally quantized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .camgeo import CameraIntrinsics
from .errors import ConfigError, NonPositiveDepth, SingularInteraction
from .perception import KeypointSet

CONDITION_LIMIT = 1e12

# Table-1 style per-channel command bounds (vx, vy, wz), in actuator units.
SIM_BOUNDS = ((-24.0, 16.0), (-9.0, 9.0), (-27.0, 40.0))
REAL_BOUNDS = ((-30.0, 30.0), (-30.0, 30.0), (-40.0, 40.0))


@dataclass(frozen=True)
class VelocityCommand:
    """Body-frame command: vx forward, vy left, wz yaw rate (counter-clockwise)."""

    vx: float
    vy: float
    wz: float

    def as_array(self) -> np.ndarray:
        return np.array([self.vx, self.vy, self.wz], dtype=float)

    @classmethod
    def from_array(cls, a) -> "VelocityCommand":
        return cls(float(a[0]), float(a[1]), float(a[2]))

    @classmethod
    def zero(cls) -> "VelocityCommand":
        return cls(0.0, 0.0, 0.0)


def twist_to_body_matrix(pitch: float) -> np.ndarray:
    """Default camera-twist -> body-velocity map for a gimbal pitched ``pitch`` down.

    With the camera x axis pointing right, a left body velocity appears as
    ``v_x(cam) = -v_left``; forward motion projects onto the camera y axis as
    ``v_y(cam) = -sin(pitch) * v_fwd`` and a yaw rate projects onto the optical
    axis as ``w_z(cam) = -sin(pitch) * yaw_rate``. The matrix inverts those
    three relations.
    """
    s = math.sin(pitch)
    return np.array([[0.0, -1.0 / s, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, -1.0 / s]])


@dataclass(frozen=True)
class ControlConfig:
    lam: float = 0.5
    depth_mode: str = "ground_truth"  # or "constant"
    constant_depth: float = 2.5
    quantize: bool = True
    command_clamp: tuple = SIM_BOUNDS
    k_v: float = 0.03  # m/s per actuator unit
    k_w: float = 0.003  # rad/s per actuator unit
    twist_to_body: np.ndarray = field(default_factory=lambda: twist_to_body_matrix(math.radians(45.0)))
    condition_limit: float = CONDITION_LIMIT

    def __post_init__(self):
        if not self.lam > 0:
            raise ConfigError("lambda must be positive")
        if self.depth_mode not in ("ground_truth", "constant"):
            raise ConfigError(f"unknown depth_mode {self.depth_mode!r}")
        if self.depth_mode == "constant" and not self.constant_depth > 0:
            raise ConfigError("constant depth must be positive")
        if not (self.k_v > 0 and self.k_w > 0):
            raise ConfigError("k_v and k_w must be positive")
        for lo, hi in self.command_clamp:
            if not lo < hi:
                raise ConfigError(f"invalid clamp interval ({lo}, {hi})")
        m = np.asarray(self.twist_to_body, dtype=float)
        if m.shape != (3, 3):
            raise ConfigError("twist_to_body must be 3x3")
        object.__setattr__(self, "twist_to_body", m)


def interaction_row_full(p, Z: float, intr: CameraIntrinsics) -> np.ndarray:
    """2x6 interaction matrix of one image point at depth Z (pixel units)."""
    if not Z > 0:
        raise NonPositiveDepth(f"depth {Z} is not positive")
    f = intr.f
    ub, vb = p[0] - intr.u0, p[1] - intr.v0
    return np.array([
        [-f / Z, 0.0, ub / Z, ub * vb / f, -(f * f + ub * ub) / f, vb],
        [0.0, -f / Z, vb / Z, (f * f + vb * vb) / f, -ub * vb / f, -ub],
    ])


def interaction_row_reduced(p, Z: float, intr: CameraIntrinsics) -> np.ndarray:
    """2x3 block for the (v_x, v_y, w_z) camera twist."""
    if not Z > 0:
        raise NonPositiveDepth(f"depth {Z} is not positive")
    g = intr.f / Z
    ub, vb = p[0] - intr.u0, p[1] - intr.v0
    return np.array([[-g, 0.0, vb], [0.0, -g, -ub]])


def stack_jacobian(kps: KeypointSet, depths, intr: CameraIntrinsics) -> np.ndarray:
    pts = kps.points if isinstance(kps, KeypointSet) else np.asarray(kps, dtype=float)
    depths = np.broadcast_to(np.asarray(depths, dtype=float), (len(pts),))
    return np.vstack([interaction_row_reduced(p, z, intr) for p, z in zip(pts, depths)])


def _sym3_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve a symmetric positive-definite 3x3 system via Cholesky factors."""
    l11 = math.sqrt(a[0, 0])
    l21 = a[1, 0] / l11
    l31 = a[2, 0] / l11
    l22 = math.sqrt(a[1, 1] - l21 * l21)
    l32 = (a[2, 1] - l31 * l21) / l22
    l33 = math.sqrt(a[2, 2] - l31 * l31 - l32 * l32)
    L = np.array([[l11, 0.0, 0.0], [l21, l22, 0.0], [l31, l32, l33]])
    y = np.empty_like(b, dtype=float)
    y[0] = b[0] / l11
    y[1] = (b[1] - l21 * y[0]) / l22
    y[2] = (b[2] - l31 * y[0] - l32 * y[1]) / l33
    x = np.empty_like(y)
    x[2] = y[2] / L[2, 2]
    x[1] = (y[1] - L[2, 1] * x[2]) / L[1, 1]
    x[0] = (y[0] - L[1, 0] * x[1] - L[2, 0] * x[2]) / L[0, 0]
    return x


def normal_matrix_condition(L: np.ndarray) -> float:
    ev = np.linalg.eigvalsh(L.T @ L)
    if ev[0] <= 0:
        return math.inf
    return float(ev[-1] / ev[0])


def pseudo_inverse(L: np.ndarray, condition_limit: float = CONDITION_LIMIT) -> np.ndarray:
    """Left pseudo-inverse ``(L^T L)^-1 L^T`` of a tall full-column-rank matrix."""
    L = np.asarray(L, dtype=float)
    if not np.all(np.isfinite(L)):
        raise SingularInteraction("interaction matrix has non-finite entries")
    if normal_matrix_condition(L) >= condition_limit:
        raise SingularInteraction("L^T L is too ill-conditioned")
    return _sym3_solve(L.T @ L, L.T)


def raw_twist(current: KeypointSet, desired: KeypointSet, depths, intr, cfg: ControlConfig):
    """Camera twist ``-lambda * pinv(L) e`` and the feature error ``e``."""
    e = current.as_vector() - desired.as_vector()
    if cfg.depth_mode == "constant":
        depths = np.full(4, cfg.constant_depth)
    L = stack_jacobian(current, depths, intr)
    twist = -cfg.lam * (pseudo_inverse(L, cfg.condition_limit) @ e)
    return twist, e


def twist_to_command(twist, cfg: ControlConfig) -> np.ndarray:
    """Unclamped actuator-unit command for a camera twist."""
    body = cfg.twist_to_body @ np.asarray(twist, dtype=float)
    return body / np.array([cfg.k_v, cfg.k_v, cfg.k_w])


def finalize_command(raw, cfg: ControlConfig) -> np.ndarray:
    lo = np.array([b[0] for b in cfg.command_clamp])
    hi = np.array([b[1] for b in cfg.command_clamp])
    out = np.clip(np.asarray(raw, dtype=float), lo, hi)
    if cfg.quantize:
        out = np.rint(out) + 0.0  # drops negative zero
    return out


def control_law(current: KeypointSet, desired: KeypointSet, depths, intr: CameraIntrinsics, cfg: ControlConfig):
    """One IBVS control step.

    Returns ``(command, error, raw)`` where ``command`` is the clamped and
    (if configured) quantized VelocityCommand, ``error`` is ``s - s*`` and
    ``raw`` is the unclamped actuator-unit command. A singular interaction
    matrix propagates as SingularInteraction; callers emit a zero command.
    """
    e = current.as_vector() - desired.as_vector()
    if not np.any(e):
        zero = np.zeros(3)
        return VelocityCommand.zero(), e, zero
    twist, e = raw_twist(current, desired, depths, intr, cfg)
    raw = twist_to_command(twist, cfg)
    return VelocityCommand.from_array(finalize_command(raw, cfg)), e, raw
