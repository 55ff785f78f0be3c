"""Fixed-altitude quadrotor simulator, episode runner and evaluation campaign.

The drone follows first-order kinematics: body-frame velocity commands are
scaled by ``k_v``/``k_w``, rotated into the world frame and Euler-integrated.
Each control step renders the target, runs perception, asks the controller
for a command, logs the frame and checks the termination rules.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import perception as P
from .camgeo import CameraIntrinsics, CarModel, GimbalConfig, Pose, camera_from_pose, ground_depths, wrap_angle
from .config import Config
from .errors import (
    AmbiguousAssignment,
    ConfigError,
    DegenerateHint,
    DegenerateMask,
    NonPositiveDepth,
    SingularInteraction,
    TargetNotVisible,
)
from .servo import ControlConfig, VelocityCommand, control_law, finalize_command
from .student.data import NormalizationBounds, denormalize, render_input

POSE_ORDER = ("up-left", "up-right", "front-left", "front-right", "left", "right", "down-left", "down-right")

OUTCOMES = ("converged_hard", "converged_soft", "converged_quiet", "timeout", "lost_target", "error")
CONVERGED = ("converged_hard", "converged_soft", "converged_quiet")


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.1
    k_v: float = 0.03
    k_w: float = 0.003
    altitude: float = 1.8
    max_duration: float = 75.0

    def __post_init__(self):
        if not self.dt > 0 or not self.max_duration > 0:
            raise ConfigError("dt and max_duration must be positive")

    @classmethod
    def from_config(cls, cfg: Config) -> "SimConfig":
        return cls(dt=cfg.sim.dt, k_v=cfg.control.k_v, k_w=cfg.control.k_w, altitude=cfg.world.altitude, max_duration=cfg.sim.max_duration)


@dataclass(frozen=True)
class Scene:
    car: CarModel
    car_pose: Pose
    intr: CameraIntrinsics
    gimbal: GimbalConfig

    @classmethod
    def from_config(cls, cfg: Config) -> "Scene":
        return cls(cfg.car(), cfg.car_pose(), cfg.intrinsics(), cfg.gimbal())


@dataclass
class SceneFrame:
    """Everything the oracle renderer produces for one drone pose."""

    drone: Pose
    mask: np.ndarray
    gt_front: np.ndarray
    gt_back: np.ndarray
    hint: tuple


def render(scene: Scene, drone: Pose) -> SceneFrame:
    extr = camera_from_pose(drone, scene.gimbal)
    mask, gf, gb = P.rasterize_car(scene.car, scene.car_pose, extr, scene.intr)
    hint = P.front_hint(scene.car, scene.car_pose, extr, scene.intr)
    return SceneFrame(drone, mask, gf, gb, hint)


def perceive(frame: SceneFrame, previous: P.KeypointSet | None = None):
    """Run centroid -> split -> OBB -> ordering on a rendered frame.

    Returns ``(keypoints, used_fallback)``. On an ambiguous corner split the
    previous frame's labeling is reused; without one the error propagates.
    """
    c = P.centroid(frame.mask)
    split = P.split_mask(frame.mask, c, frame.hint)
    corners = P.min_area_obb(frame.mask)
    try:
        return P.order_keypoints(corners, split), False
    except AmbiguousAssignment:
        if previous is None:
            raise
        return P.order_like_previous(corners, previous), True


def keypoint_depths(kps: P.KeypointSet, drone: Pose, scene: Scene) -> np.ndarray:
    extr = camera_from_pose(drone, scene.gimbal)
    return ground_depths(kps.points, extr, scene.intr, ground_z=scene.car_pose.z)


# --------------------------------------------------------------------------
# kinematics


def step(pose: Pose, cmd: VelocityCommand, cfg: SimConfig) -> Pose:
    vf, vl = cfg.k_v * cmd.vx, cfg.k_v * cmd.vy
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    return Pose(
        pose.x + (c * vf - s * vl) * cfg.dt,
        pose.y + (s * vf + c * vl) * cfg.dt,
        pose.z,
        pose.yaw + cfg.k_w * cmd.wz * cfg.dt,
    )


# --------------------------------------------------------------------------
# start poses


@dataclass(frozen=True)
class StartPoseSpec:
    """Nominal start pose around the car.

    ``bearing_deg`` is measured at the car from its rear axis, positive
    towards the car's left; the drone faces the car center.
    """

    label: str
    bearing_deg: float
    distance: float
    jitter_xy: float = 0.3
    jitter_yaw_deg: float = 5.0

    def nominal(self, scene: Scene, altitude: float) -> Pose:
        axis = scene.car.world_front_axis(scene.car_pose)[:2]
        rear = -axis
        left = np.array([-axis[1], axis[0]])
        b = math.radians(self.bearing_deg)
        pos = np.array([scene.car_pose.x, scene.car_pose.y]) + self.distance * (math.cos(b) * rear + math.sin(b) * left)
        to_car = np.array([scene.car_pose.x, scene.car_pose.y]) - pos
        return Pose(float(pos[0]), float(pos[1]), altitude, math.atan2(to_car[1], to_car[0]))

    def sample(self, scene: Scene, altitude: float, rng: np.random.Generator) -> Pose:
        p = self.nominal(scene, altitude)
        dx, dy = rng.uniform(-self.jitter_xy, self.jitter_xy, size=2)
        dyaw = math.radians(rng.uniform(-self.jitter_yaw_deg, self.jitter_yaw_deg))
        return Pose(p.x + dx, p.y + dy, p.z, p.yaw + dyaw)


def start_pose_specs(cfg: Config) -> dict:
    w = cfg.world
    table = {
        "down-left": (45.0, w.diagonal_distance),
        "down-right": (-45.0, w.diagonal_distance),
        "left": (90.0, w.lateral_distance),
        "right": (-90.0, w.lateral_distance),
        "up-left": (135.0, w.diagonal_distance),
        "up-right": (-135.0, w.diagonal_distance),
        "front-left": (166.0, w.frontal_distance),
        "front-right": (-166.0, w.frontal_distance),
    }
    return {k: StartPoseSpec(k, b, d, w.jitter_xy, w.jitter_yaw_deg) for k, (b, d) in table.items()}


def goal_pose(scene: Scene, altitude: float) -> Pose:
    """Directly behind the car, far enough back that the car center is on the optical axis."""
    axis = scene.car.world_front_axis(scene.car_pose)[:2]
    back = (altitude - scene.car_pose.z) / math.tan(scene.gimbal.pitch)
    pos = np.array([scene.car_pose.x, scene.car_pose.y]) - back * axis
    return Pose(float(pos[0]), float(pos[1]), altitude, math.atan2(axis[1], axis[0]))


def capture_reference(goal: Pose, scene: Scene) -> P.KeypointSet:
    kps, _ = perceive(render(scene, goal))
    return kps


# --------------------------------------------------------------------------
# termination


@dataclass(frozen=True)
class TerminationRules:
    hard_threshold: float = 40.0
    soft_threshold: float = 80.0
    quiet_threshold: float = 1.0
    window: int = 5
    persistence: float = 3.0
    timeout: float = 75.0
    kinds: tuple = ("hard_error", "soft_zero", "timeout")

    def __post_init__(self):
        if min(self.hard_threshold, self.soft_threshold, self.quiet_threshold, self.persistence, self.timeout) <= 0:
            raise ConfigError("termination thresholds must be positive")
        if self.window < 1:
            raise ConfigError("window must be >= 1")


TEACHER_RULES = ("hard_error", "soft_zero", "timeout")
STUDENT_RULES = ("hard_error", "soft_zero", "student_quiet", "timeout")

_KIND_OUTCOME = {
    "hard_error": "converged_hard",
    "soft_zero": "converged_soft",
    "student_quiet": "converged_quiet",
    "timeout": "timeout",
}


@dataclass(frozen=True)
class HistoryItem:
    t: float
    error: float
    command: tuple  # quantized command actually sent


def _median_ok(history, j, rules, threshold):
    if j + 1 < rules.window:
        return False
    errs = [h.error for h in history[j + 1 - rules.window : j + 1]]
    return statistics.median(errs) <= threshold


def _predicate(kind, history, j, rules):
    if kind == "hard_error":
        return _median_ok(history, j, rules, rules.hard_threshold)
    if kind == "soft_zero":
        return _median_ok(history, j, rules, rules.soft_threshold) and not any(history[j].command)
    if kind == "student_quiet":
        if j + 1 < rules.window:
            return False
        cmds = np.array([h.command for h in history[j + 1 - rules.window : j + 1]], dtype=float)
        return bool(np.all(np.abs(cmds) <= rules.quiet_threshold))
    raise ValueError(kind)


def _held_for(kind, history, rules) -> float:
    """How long the predicate has held continuously up to the last frame (-1 if not now)."""
    last = len(history) - 1
    j = last
    while j >= 0 and _predicate(kind, history, j, rules):
        j -= 1
    if j == last:
        return -1.0
    return history[last].t - history[j + 1].t


def check_termination(history: Sequence[HistoryItem], rules: TerminationRules) -> str | None:
    """Outcome for the latest frame, or None to keep flying.

    Precedence: hard_error > soft_zero > student_quiet > timeout.
    """
    if not history:
        return None
    eps = 1e-9
    for kind in ("hard_error", "soft_zero", "student_quiet"):
        if kind in rules.kinds and _held_for(kind, history, rules) >= rules.persistence - eps:
            return _KIND_OUTCOME[kind]
    if "timeout" in rules.kinds and history[-1].t >= rules.timeout - eps:
        return "timeout"
    return None


# --------------------------------------------------------------------------
# episodes


@dataclass
class FrameRecord:
    t: float
    pose: Pose
    keypoints: P.KeypointSet | None
    error_norm: float
    raw: np.ndarray
    command: VelocityCommand
    fallback: bool = False
    singular: bool = False


@dataclass
class EpisodeLog:
    pose_label: str
    run_index: int
    seed: int
    controller: str
    frames: list = field(default_factory=list)
    outcome: str | None = None
    message: str = ""

    def set_outcome(self, outcome: str, message: str = "") -> None:
        if self.outcome is not None:
            raise RuntimeError("episode outcome already set")
        if outcome not in OUTCOMES:
            raise ValueError(outcome)
        self.outcome = outcome
        self.message = message

    @property
    def converged(self) -> bool:
        return self.outcome in CONVERGED

    # persistence --------------------------------------------------------
    CSV_HEADER = (
        ["frame", "t", "x", "y", "z", "yaw"]
        + [f"{lab}_{ax}" for lab in P.LABELS for ax in ("u", "v")]
        + ["error_norm", "raw_vx", "raw_vy", "raw_wz", "cmd_vx", "cmd_vy", "cmd_wz", "fallback", "singular"]
    )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_HEADER)
        for i, fr in enumerate(self.frames):
            kp = fr.keypoints.as_vector() if fr.keypoints is not None else [float("nan")] * 8
            w.writerow(
                [i] + [repr(float(v)) for v in (fr.t, fr.pose.x, fr.pose.y, fr.pose.z, fr.pose.yaw)]
                + [repr(float(x)) for x in kp]
                + [repr(float(fr.error_norm))]
                + [repr(float(x)) for x in fr.raw]
                + [repr(float(x)) for x in fr.command.as_array()]
                + [int(fr.fallback), int(fr.singular)]
            )
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "pose": self.pose_label,
            "run": self.run_index,
            "seed": self.seed,
            "controller": self.controller,
            "outcome": self.outcome,
            "message": self.message,
            "frames": len(self.frames),
            "duration": self.frames[-1].t - self.frames[0].t if self.frames else 0.0,
        }

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        stem = f"{self.pose_label}_{self.run_index:03d}"
        (d / f"{stem}.csv").write_text(self.to_csv())
        (d / f"{stem}.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, csv_path) -> "EpisodeLog":
        csv_path = Path(csv_path)
        meta = json.loads(csv_path.with_suffix(".json").read_text())
        log = cls(meta["pose"], meta["run"], meta["seed"], meta["controller"])
        with open(csv_path, newline="") as fh:
            for row in csv.DictReader(fh):
                kp = np.array([float(row[f"{lab}_{ax}"]) for lab in P.LABELS for ax in ("u", "v")])
                log.frames.append(
                    FrameRecord(
                        t=float(row["t"]),
                        pose=Pose(float(row["x"]), float(row["y"]), float(row["z"]), float(row["yaw"])),
                        keypoints=None if np.isnan(kp).any() else P.KeypointSet.from_vector(kp),
                        error_norm=float(row["error_norm"]),
                        raw=np.array([float(row[k]) for k in ("raw_vx", "raw_vy", "raw_wz")]),
                        command=VelocityCommand(float(row["cmd_vx"]), float(row["cmd_vy"]), float(row["cmd_wz"])),
                        fallback=bool(int(row["fallback"])),
                        singular=bool(int(row["singular"])),
                    )
                )
        log.outcome = meta["outcome"]
        log.message = meta.get("message", "")
        return log


class TeacherController:
    """Perception keypoints + reduced IBVS law."""

    name = "teacher"
    rules = TEACHER_RULES

    def __init__(self, scene: Scene, desired: P.KeypointSet, control: ControlConfig):
        self.scene = scene
        self.desired = desired
        self.control = control

    def __call__(self, frame: SceneFrame, kps: P.KeypointSet):
        depths = keypoint_depths(kps, frame.drone, self.scene)
        cmd, _, raw = control_law(kps, self.desired, depths, self.scene.intr, self.control)
        return cmd, raw


class StudentController:
    """Network regressing the command straight from the rendered frame tensor.

    Perception still runs in the episode loop, but only to log the keypoint
    error; the command never depends on it.
    """

    name = "student"
    rules = STUDENT_RULES

    def __init__(self, net, desired: P.KeypointSet, control: ControlConfig, bounds: NormalizationBounds, input_size: int):
        self.net = net
        self.desired = desired
        self.control = control
        self.bounds = bounds
        self.input_size = input_size

    def __call__(self, frame: SceneFrame, kps=None):
        y = self.net.forward(render_input(frame, self.input_size), training=False)
        raw = denormalize(y, self.bounds)
        return VelocityCommand.from_array(finalize_command(raw, self.control)), raw


def episode_seed(campaign_seed: int, pose_label: str, run_index: int) -> int:
    """Deterministic per-episode seed derived from the campaign seed."""
    ss = np.random.SeedSequence([int(campaign_seed), POSE_ORDER.index(pose_label) if pose_label in POSE_ORDER else 99, int(run_index)])
    return int(ss.generate_state(1)[0])


def run_episode(
    start: StartPoseSpec | Pose,
    controller: Callable,
    cfg: Config,
    seed: int,
    *,
    run_index: int = 0,
    rules: TerminationRules | None = None,
) -> EpisodeLog:
    """Fly one episode from a (jittered) start pose until a termination rule fires."""
    scene = Scene.from_config(cfg)
    sim = SimConfig.from_config(cfg)
    desired = getattr(controller, "desired", None)
    if desired is None:
        desired = capture_reference(goal_pose(scene, sim.altitude), scene)
    rules = rules or TerminationRules(timeout=sim.max_duration, kinds=tuple(getattr(controller, "rules", TEACHER_RULES)))
    rng = np.random.default_rng(seed)
    if isinstance(start, StartPoseSpec):
        label = start.label
        pose = start.sample(scene, sim.altitude, rng)
    else:
        label = "custom"
        pose = start
    log = EpisodeLog(label, run_index, seed, getattr(controller, "name", "custom"))
    history: list[HistoryItem] = []
    previous = None
    n_steps = int(round(sim.max_duration / sim.dt))
    for k in range(n_steps + 1):
        t = k * sim.dt
        try:
            frame = render(scene, pose)
            kps, fallback = perceive(frame, previous)
        except (TargetNotVisible, DegenerateMask) as exc:
            log.set_outcome("lost_target", str(exc))
            break
        except (AmbiguousAssignment, DegenerateHint) as exc:
            log.set_outcome("error", f"{type(exc).__name__}: {exc}")
            break
        previous = kps
        err = float(np.linalg.norm(kps.as_vector() - desired.as_vector()))
        singular = False
        try:
            cmd, raw = controller(frame, kps)
        except (SingularInteraction, NonPositiveDepth):
            cmd, raw, singular = VelocityCommand.zero(), np.zeros(3), True
        log.frames.append(FrameRecord(t, pose, kps, err, np.asarray(raw, dtype=float), cmd, fallback, singular))
        history.append(HistoryItem(t, err, (cmd.vx, cmd.vy, cmd.wz)))
        outcome = check_termination(history, rules)
        if outcome is not None:
            log.set_outcome(outcome)
            break
        pose = step(pose, cmd, sim)
    if log.outcome is None:
        log.set_outcome("timeout")
    return log


# --------------------------------------------------------------------------
# campaigns


def _campaign_worker(args):
    cfg, controller_factory, label, run_index, seed = args
    spec = start_pose_specs(cfg)[label]
    controller = controller_factory(cfg)
    try:
        return run_episode(spec, controller, cfg, seed, run_index=run_index)
    except Exception as exc:  # recorded per run, never aborts the campaign
        log = EpisodeLog(label, run_index, seed, getattr(controller, "name", "custom"))
        log.set_outcome("error", f"{type(exc).__name__}: {exc}")
        return log


def make_teacher(cfg: Config) -> TeacherController:
    scene = Scene.from_config(cfg)
    desired = capture_reference(goal_pose(scene, cfg.world.altitude), scene)
    return TeacherController(scene, desired, cfg.control_config())


def student_factory(source):
    """Controller factory for a StudentNet or a weights path (loaded per worker)."""
    return _StudentFactory(source if not isinstance(source, (str, Path)) else str(source))


class _StudentFactory:
    def __init__(self, source):
        self.source = source

    def __call__(self, cfg: Config) -> StudentController:
        from .student.net import StudentNet

        scene = Scene.from_config(cfg)
        desired = capture_reference(goal_pose(scene, cfg.world.altitude), scene)
        net = StudentNet.load(self.source) if isinstance(self.source, str) else self.source
        bounds = NormalizationBounds.from_pairs(cfg.student.bounds)
        return StudentController(net, desired, cfg.control_config(), bounds, cfg.student.input_size)


def run_campaign(
    cfg: Config,
    controller_factory: Callable[[Config], Callable] = make_teacher,
    runs_per_pose: int = 1,
    seed: int = 0,
    poses: Sequence[str] = POSE_ORDER,
    workers: int | None = None,
) -> list:
    """Run ``runs_per_pose`` episodes from every start pose; logs sorted by (pose order, run)."""
    if runs_per_pose < 1:
        raise ConfigError("runs_per_pose must be >= 1")
    for p in poses:
        if p not in POSE_ORDER:
            raise ConfigError(f"unknown pose {p!r}")
    jobs = [(cfg, controller_factory, p, i, episode_seed(seed, p, i)) for p in poses for i in range(runs_per_pose)]
    if workers is None:
        workers = int(os.environ.get("NSER_THREADS", "1") or 1)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            logs = list(ex.map(_campaign_worker, jobs))
    else:
        logs = [_campaign_worker(j) for j in jobs]
    return sorted(logs, key=lambda lg: (POSE_ORDER.index(lg.pose_label), lg.run_index))
