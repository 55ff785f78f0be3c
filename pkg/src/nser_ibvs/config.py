"""Run configuration: world, camera, controller and simulator settings.

Configs are YAML files with optional sections ``camera``, ``world``,
``control``, ``sim`` and ``student``. Missing keys fall back to defaults;
unknown keys are a ConfigError so typos do not silently change a campaign.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from .camgeo import CameraIntrinsics, CarModel, GimbalConfig, Pose
from .errors import ConfigError
from .servo import SIM_BOUNDS, ControlConfig, twist_to_body_matrix


@dataclass(frozen=True)
class CameraSection:
    width: int = 640
    height: int = 360
    fov_deg: float = 69.0
    f_px: float | None = None
    pitch_deg: float = 45.0


@dataclass(frozen=True)
class WorldSection:
    car_length: float = 0.5
    car_width: float = 0.25
    altitude: float = 1.8
    diagonal_distance: float = 2.5
    lateral_distance: float = 2.0
    frontal_distance: float = 3.0
    jitter_xy: float = 0.3
    jitter_yaw_deg: float = 5.0


@dataclass(frozen=True)
class ControlSection:
    lam: float = 0.5
    depth_mode: str = "ground_truth"
    constant_depth: float = 2.5
    quantize: bool = True
    clamp: tuple = SIM_BOUNDS
    k_v: float = 0.03
    k_w: float = 0.003
    twist_to_body: tuple | None = None


@dataclass(frozen=True)
class SimSection:
    dt: float = 0.1
    max_duration: float = 75.0


@dataclass(frozen=True)
class StudentSection:
    input_size: int = 64
    channels: tuple = (8, 16, 32, 64)
    strides: tuple = (2, 1, 1, 1)
    hidden: int = 32
    bounds: tuple = SIM_BOUNDS
    lr: float = 1e-3
    batch_size: int = 32
    patience: int = 3
    min_delta: float = 1e-4
    max_epochs: int = 15
    augment_factor: int = 5
    val_fraction: float = 0.1
    frame_stride: int = 10


@dataclass(frozen=True)
class Config:
    camera: CameraSection = field(default_factory=CameraSection)
    world: WorldSection = field(default_factory=WorldSection)
    control: ControlSection = field(default_factory=ControlSection)
    sim: SimSection = field(default_factory=SimSection)
    student: StudentSection = field(default_factory=StudentSection)

    # derived objects -----------------------------------------------------
    def intrinsics(self) -> CameraIntrinsics:
        c = self.camera
        if c.f_px is not None:
            return CameraIntrinsics(f=float(c.f_px), u0=c.width / 2.0, v0=c.height / 2.0, width=c.width, height=c.height)
        return CameraIntrinsics.from_fov(c.width, c.height, c.fov_deg)

    def gimbal(self) -> GimbalConfig:
        return GimbalConfig(pitch=math.radians(self.camera.pitch_deg))

    def car(self) -> CarModel:
        return CarModel(length=self.world.car_length, width=self.world.car_width)

    def car_pose(self) -> Pose:
        return Pose(0.0, 0.0, 0.0, 0.0)

    def control_config(self) -> ControlConfig:
        c = self.control
        m = twist_to_body_matrix(self.gimbal().pitch) if c.twist_to_body is None else np.asarray(c.twist_to_body, dtype=float)
        return ControlConfig(
            lam=c.lam,
            depth_mode=c.depth_mode,
            constant_depth=c.constant_depth,
            quantize=c.quantize,
            command_clamp=tuple(tuple(b) for b in c.clamp),
            k_v=c.k_v,
            k_w=c.k_w,
            twist_to_body=m,
        )

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()


_SECTION_TYPES = {
    "camera": CameraSection,
    "world": WorldSection,
    "control": ControlSection,
    "sim": SimSection,
    "student": StudentSection,
}


def _tupleize(v):
    if isinstance(v, list):
        return tuple(_tupleize(x) for x in v)
    return v


def config_from_dict(data: dict | None) -> Config:
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    kwargs = {}
    for name, section in data.items():
        if name not in _SECTION_TYPES:
            raise ConfigError(f"unknown config section {name!r}")
        cls = _SECTION_TYPES[name]
        known = {f.name for f in fields(cls)}
        section = section or {}
        bad = set(section) - known
        if bad:
            raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
        kwargs[name] = cls(**{k: _tupleize(v) for k, v in section.items()})
    cfg = Config(**kwargs)
    validate(cfg)
    return cfg


def validate(cfg: Config) -> None:
    try:
        cfg.intrinsics()
        cfg.gimbal()
        cfg.car()
        cfg.control_config()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if not cfg.sim.dt > 0 or not cfg.sim.max_duration > 0:
        raise ConfigError("dt and max_duration must be positive")
    if not cfg.world.altitude > 0:
        raise ConfigError("altitude must be positive")


def load_config(path=None) -> Config:
    if path is None:
        return Config()
    try:
        data = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(data)


def with_overrides(cfg: Config, section: str, **values) -> Config:
    return replace(cfg, **{section: replace(getattr(cfg, section), **values)})
