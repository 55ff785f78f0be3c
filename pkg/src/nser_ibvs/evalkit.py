"""Flight metrics, per-pose reports, the timing benchmark and trajectory plots."""

from __future__ import annotations

import csv
import gc
import io
import math
import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import DegenerateQuad, EpisodeTooShort
from .perception import KeypointSet

WINDOW_S = 3.0
# float slack for the final-window boundary: frames with t >= t_end - 3 - EPS count
WINDOW_EPS = 1e-9
AREA_EPS = 1e-12


def _quad(q) -> np.ndarray:
    if isinstance(q, KeypointSet):
        return np.asarray(q.points, dtype=float)
    return np.asarray(q, dtype=float).reshape(-1, 2)


# --------------------------------------------------------------------------
# per-frame metrics


def error_norm(current, desired) -> float:
    """L2 norm of the stacked 8-vector of coordinate differences (pixels)."""
    d = _quad(current) - _quad(desired)
    return float(math.sqrt(float(np.sum(d * d))))


def polygon_area(poly) -> float:
    """Shoelace area with sign (positive for counter-clockwise in x-right/y-up)."""
    p = np.asarray(poly, dtype=float)
    if len(p) < 3:
        return 0.0
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _ccw(poly: np.ndarray) -> np.ndarray:
    return poly if polygon_area(poly) > 0 else poly[::-1]


def clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: part of ``subject`` inside convex ``clip`` (both CCW)."""
    out = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp, out = out, []

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    out.append(_cross_point(prev, cur, sp, sc))
                out.append(cur)
            elif sp >= 0:
                out.append(_cross_point(prev, cur, sp, sc))
            prev, sp = cur, sc
    return np.asarray(out, dtype=float).reshape(-1, 2)


def _cross_point(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def quad_iou(a, b) -> float:
    """Intersection over union of two convex quads."""
    pa, pb = _ccw(_quad(a)), _ccw(_quad(b))
    if tuple(pa.ravel()) > tuple(pb.ravel()):
        pa, pb = pb, pa  # fixed evaluation order makes the result exactly symmetric
    area_a, area_b = polygon_area(pa), polygon_area(pb)
    if area_a <= AREA_EPS or area_b <= AREA_EPS:
        raise DegenerateQuad("quad has zero area")
    inter = polygon_area(clip_convex(pa, pb))
    inter = max(inter, 0.0)
    iou = inter / (area_a + area_b - inter)
    return float(min(max(iou, 0.0), 1.0))


# --------------------------------------------------------------------------
# episode metrics


def final_window_metrics(log, desired, window: float = WINDOW_S) -> tuple:
    """Mean error norm and IoU over frames with ``t_end - window <= t <= t_end``.

    Frames without keypoints (none are logged in practice) are skipped.
    """
    frames = log.frames
    if len(frames) < 2 or frames[-1].t - frames[0].t < window - WINDOW_EPS:
        raise EpisodeTooShort(f"episode shorter than {window} s")
    t_end = frames[-1].t
    sel = [fr for fr in frames if fr.t >= t_end - window - WINDOW_EPS and fr.keypoints is not None]
    errs = [error_norm(fr.keypoints, desired) for fr in sel]
    ious = [quad_iou(fr.keypoints, desired) for fr in sel]
    return math.fsum(errs) / len(errs), math.fsum(ious) / len(ious)


def flight_stats(log) -> tuple:
    """(horizontal distance flown in m, duration in s)."""
    frames = log.frames
    if len(frames) < 2:
        return 0.0, 0.0
    xy = np.array([[fr.pose.x, fr.pose.y] for fr in frames])
    dist = math.fsum(np.hypot(*np.diff(xy, axis=0).T).tolist())
    return dist, frames[-1].t - frames[0].t


# --------------------------------------------------------------------------
# reports


REPORT_COLUMNS = [
    "pose",
    "method",
    "runs",
    "converged",
    "convergence_rate",
    "distance_m",
    "distance_std",
    "time_s",
    "time_std",
    "final_error_px",
    "final_iou",
]


def _mean_std(xs):
    if not xs:
        return float("nan"), float("nan")
    m = math.fsum(xs) / len(xs)
    s = math.sqrt(math.fsum((x - m) ** 2 for x in xs) / len(xs))
    return m, s


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.rows:
            w.writerow([r[c] if isinstance(r[c], (str, int)) else f"{r[c]:.6f}" for c in REPORT_COLUMNS])
        return buf.getvalue()

    def row(self, pose: str, method: str) -> dict:
        for r in self.rows:
            if r["pose"] == pose and r["method"] == method:
                return r
        raise KeyError((pose, method))


def build_report(logs: Sequence, desired, pose_order: Sequence[str] | None = None) -> MetricReport:
    """Per (pose, method) aggregates; flight and final-window metrics use converged runs.

    Sums are exact (``math.fsum``), so the report does not depend on log order.
    """
    groups: dict = {}
    for lg in logs:
        groups.setdefault((lg.pose_label, lg.controller), []).append(lg)
    order = list(pose_order or [])

    def key(k):
        pose, method = k
        return (order.index(pose) if pose in order else len(order), pose, method)

    rows = []
    for pose, method in sorted(groups, key=key):
        group = groups[(pose, method)]
        conv = [lg for lg in group if lg.converged]
        dists, times, errs, ious = [], [], [], []
        for lg in conv:
            d, t = flight_stats(lg)
            dists.append(d)
            times.append(t)
            try:
                e, i = final_window_metrics(lg, desired)
            except EpisodeTooShort:
                continue
            errs.append(e)
            ious.append(i)
        dm, ds = _mean_std(dists)
        tm, ts = _mean_std(times)
        rows.append(
            {
                "pose": pose,
                "method": method,
                "runs": len(group),
                "converged": len(conv),
                "convergence_rate": len(conv) / len(group),
                "distance_m": dm,
                "distance_std": ds,
                "time_s": tm,
                "time_std": ts,
                "final_error_px": _mean_std(errs)[0],
                "final_iou": _mean_std(ious)[0],
            }
        )
    return MetricReport(rows)


# --------------------------------------------------------------------------
# timing


TIMING_COLUMNS = ["evaluator", "avg_ms", "std_ms", "median_ms", "min_ms", "max_ms", "fps"]


@dataclass
class TimingRow:
    evaluator: str
    avg_ms: float
    std_ms: float
    median_ms: float
    min_ms: float
    max_ms: float
    fps: float


@dataclass
class TimingReport:
    rows: list
    trials: int
    frames: int
    warmup: int

    def row(self, name: str) -> TimingRow:
        for r in self.rows:
            if r.evaluator == name:
                return r
        raise KeyError(name)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"# trials={self.trials} frames={self.frames} warmup={self.warmup}"])
        w.writerow(TIMING_COLUMNS)
        for r in self.rows:
            w.writerow([r.evaluator] + [f"{getattr(r, c):.6f}" for c in TIMING_COLUMNS[1:]])
        return buf.getvalue()


def timing_stats(name: str, samples_ms: Sequence[float]) -> TimingRow:
    xs = [float(x) for x in samples_ms]
    avg = math.fsum(xs) / len(xs)
    std = statistics.pstdev(xs) if len(xs) > 1 else 0.0
    return TimingRow(name, avg, std, statistics.median(xs), min(xs), max(xs), 1000.0 / avg)


def timing_benchmark(
    evaluators: Mapping[str, Callable],
    frames: Sequence,
    trials: int = 30,
    warmup: int = 1,
    clock: Callable[[], float] = time.perf_counter,
) -> TimingReport:
    """Per-frame wall-clock time of each evaluator over ``trials`` passes.

    A trial runs every evaluator (in mapping order) over the full frame set;
    its sample is the mean per-frame time of that pass. Trials interleave
    evaluators, warmup passes are discarded, and garbage is collected (with
    the collector then paused) before each timed pass.
    """
    if not frames:
        raise ValueError("timing_benchmark needs at least one frame")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    names = list(evaluators)
    for _ in range(warmup):
        for name in names:
            for fr in frames:
                evaluators[name](fr)
    samples = {name: [] for name in names}
    was_enabled = gc.isenabled()
    try:
        for _ in range(trials):
            for name in names:
                fn = evaluators[name]
                gc.collect()
                gc.disable()
                t0 = clock()
                for fr in frames:
                    fn(fr)
                dt = clock() - t0
                if was_enabled:
                    gc.enable()
                samples[name].append(1000.0 * dt / len(frames))
    finally:
        if was_enabled:
            gc.enable()
    rows = [timing_stats(name, samples[name]) for name in names]
    return TimingReport(rows, trials, len(frames), warmup)


def bench_frames(cfg, n_frames: int = 40, seed: int = 0) -> list:
    """Rendered frames from jittered start poses, cycling through every pose."""
    from .simkit import POSE_ORDER, Scene, render, start_pose_specs

    scene = Scene.from_config(cfg)
    specs = start_pose_specs(cfg)
    rng = np.random.default_rng(seed)
    return [render(scene, specs[POSE_ORDER[i % len(POSE_ORDER)]].sample(scene, cfg.world.altitude, rng)) for i in range(n_frames)]


def teacher_evaluator(cfg) -> Callable:
    """Mask to command: centroid, split, OBB, ordering, depths, control law."""
    from .simkit import make_teacher, perceive

    teacher = make_teacher(cfg)

    def run(frame):
        kps, _ = perceive(frame, None)
        return teacher(frame, kps)

    return run


def student_evaluator(cfg, net) -> Callable:
    """Frame to command: input tensor, forward pass, denormalize, clamp."""
    from .simkit import student_factory

    return student_factory(net)(cfg)


# --------------------------------------------------------------------------
# plots


_PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"]


def _resample(xy: np.ndarray, n: int) -> np.ndarray:
    s = np.linspace(0.0, 1.0, len(xy))
    q = np.linspace(0.0, 1.0, n)
    return np.stack([np.interp(q, s, xy[:, 0]), np.interp(q, s, xy[:, 1])], axis=1)


def trajectory_svg(logs: Sequence, car_corners=None, size: int = 600, samples: int = 100) -> str:
    """Top-down plot: per pose, the mean path over runs (resampled by progress)
    drawn over a band of mean +/- one standard deviation."""
    groups: dict = {}
    for lg in logs:
        if len(lg.frames) >= 2:
            groups.setdefault(lg.pose_label, []).append(np.array([[f.pose.x, f.pose.y] for f in lg.frames]))
    pts = [p for paths in groups.values() for p in paths]
    if car_corners is not None:
        pts.append(np.asarray(car_corners, dtype=float)[:, :2])
    allp = np.concatenate(pts) if pts else np.zeros((1, 2))
    lo, hi = allp.min(axis=0) - 0.3, allp.max(axis=0) + 0.3
    scale = (size - 20) / float(max(hi - lo))

    def tx(p):
        # world x to the right, world y up
        return 10 + (p[..., 0] - lo[0]) * scale, size - 10 - (p[..., 1] - lo[1]) * scale

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">']
    out.append(f'<rect width="{size}" height="{size}" fill="white"/>')
    if car_corners is not None:
        x, y = tx(np.asarray(car_corners, dtype=float)[:, :2])
        pts_s = " ".join(f"{a:.1f},{b:.1f}" for a, b in zip(x, y))
        out.append(f'<polygon points="{pts_s}" fill="#444"/>')
    for k, (pose, paths) in enumerate(sorted(groups.items())):
        color = _PALETTE[k % len(_PALETTE)]
        rs = np.stack([_resample(p, samples) for p in paths])
        mean, std = rs.mean(axis=0), rs.std(axis=0)
        # band: offset the mean along its normal by the radial spread
        d = np.gradient(mean, axis=0)
        nrm = np.stack([-d[:, 1], d[:, 0]], axis=1)
        nrm /= np.maximum(np.linalg.norm(nrm, axis=1, keepdims=True), 1e-12)
        r = np.linalg.norm(std, axis=1, keepdims=True)
        band = np.concatenate([mean + r * nrm, (mean - r * nrm)[::-1]])
        bx, by = tx(band)
        out.append(f'<polygon points="{" ".join(f"{a:.1f},{b:.1f}" for a, b in zip(bx, by))}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
        mx, my = tx(mean)
        out.append(f'<polyline points="{" ".join(f"{a:.1f},{b:.1f}" for a, b in zip(mx, my))}" fill="none" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{mx[0]:.1f}" y="{my[0] - 4:.1f}" font-size="11" fill="{color}">{pose} (n={len(paths)})</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
