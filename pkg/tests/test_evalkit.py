import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import monte_carlo_iou, random_convex_quad
from nser_ibvs import evalkit as E
from nser_ibvs.camgeo import Pose
from nser_ibvs.errors import DegenerateQuad, EpisodeTooShort
from nser_ibvs.perception import KeypointSet
from nser_ibvs.servo import VelocityCommand
from nser_ibvs.simkit import EpisodeLog, FrameRecord

SQUARE = np.array([[0.0, 0.0], [10.0, 0.0], [10.0, 10.0], [0.0, 10.0]])


def _log(points_per_frame, poses=None, dt=0.1, label="left", outcome="converged_hard", controller="teacher", run=0):
    log = EpisodeLog(label, run, 0, controller)
    for i, pts in enumerate(points_per_frame):
        pose = poses[i] if poses is not None else Pose(0, 0, 1.8, 0)
        kps = KeypointSet(np.asarray(pts, dtype=float))
        log.frames.append(FrameRecord(round(i * dt, 10), pose, kps, 0.0, np.zeros(3), VelocityCommand.zero()))
    log.set_outcome(outcome)
    return log


# -- error norm --------------------------------------------------------------


def test_error_norm_examples():
    assert E.error_norm(SQUARE, SQUARE) == 0.0
    assert E.error_norm(SQUARE + [3.0, 4.0], SQUARE) == 10.0


def test_error_norm_scalar_oracle(rng):
    for _ in range(200):
        a, b = rng.normal(0, 100, (4, 2)), rng.normal(0, 100, (4, 2))
        acc = 0.0
        for i in range(4):
            for j in range(2):
                acc += (a[i, j] - b[i, j]) ** 2
        assert E.error_norm(a, b) == pytest.approx(math.sqrt(acc), abs=1e-12, rel=1e-15)


def test_error_norm_is_a_metric(rng):
    for _ in range(200):
        a, b, c = (rng.normal(0, 50, (4, 2)) for _ in range(3))
        assert E.error_norm(a, b) >= 0
        assert E.error_norm(a, b) == E.error_norm(b, a)
        assert E.error_norm(a, c) <= E.error_norm(a, b) + E.error_norm(b, c) + 1e-9


# -- IoU ---------------------------------------------------------------------


def test_iou_examples():
    assert E.quad_iou(SQUARE, SQUARE) == 1.0
    assert E.quad_iou(SQUARE, SQUARE + 20.0) == 0.0
    assert E.quad_iou(SQUARE, SQUARE + [5.0, 0.0]) == pytest.approx(50.0 / 150.0)
    assert E.quad_iou(SQUARE, SQUARE[::-1]) == 1.0


def test_iou_matches_monte_carlo():
    rng = np.random.default_rng(21)
    for _ in range(30):
        a = random_convex_quad(rng)
        b = random_convex_quad(rng, center=rng.uniform(-40, 40, 2))
        assert abs(E.quad_iou(a, b) - monte_carlo_iou(a, b, 200_000, rng)) < 0.01


def test_iou_symmetry_and_translation(rng):
    for _ in range(200):
        a = random_convex_quad(rng)
        b = random_convex_quad(rng, center=rng.uniform(-30, 30, 2))
        iab = E.quad_iou(a, b)
        assert 0.0 <= iab <= 1.0
        assert abs(iab - E.quad_iou(b, a)) <= 1e-12
        assert E.quad_iou(a, a) == pytest.approx(1.0, abs=1e-12)
        t = rng.uniform(-500, 500, 2)
        assert abs(iab - E.quad_iou(a + t, b + t)) <= 1e-9


def test_iou_degenerate():
    with pytest.raises(DegenerateQuad):
        E.quad_iou(np.zeros((4, 2)), SQUARE)


def test_clip_convex_nested():
    inner = SQUARE * 0.5 + 2.0
    assert E.polygon_area(E.clip_convex(inner, SQUARE)) == pytest.approx(25.0)


# -- episode metrics ---------------------------------------------------------


def test_final_window_constant():
    log = _log([SQUARE + 1.0] * 50)
    err, iou = E.final_window_metrics(log, SQUARE)
    assert err == pytest.approx(math.sqrt(8.0))
    assert iou == pytest.approx(81.0 / 119.0)


def test_final_window_boundary():
    # t = 0.0 .. 4.0; window covers t >= 1.0 inclusive: 31 frames
    shifts = [0.0] * 10 + [2.0] * 31
    log = _log([SQUARE + [s, 0.0] for s in shifts])
    assert log.frames[10].t == pytest.approx(1.0)
    err, _ = E.final_window_metrics(log, SQUARE)
    assert err == pytest.approx(2.0 * 2.0)  # sqrt(4 * 2^2)
    shifts[10] = 0.0  # the boundary frame itself is included
    err, _ = E.final_window_metrics(_log([SQUARE + [s, 0.0] for s in shifts]), SQUARE)
    assert err == pytest.approx(4.0 * 30 / 31)


def test_final_window_too_short():
    with pytest.raises(EpisodeTooShort):
        E.final_window_metrics(_log([SQUARE] * 20), SQUARE)


def test_flight_stats():
    poses = [Pose(0.1 * i, 0.0, 1.8, 0.0) for i in range(51)]
    d, t = E.flight_stats(_log([SQUARE] * 51, poses))
    assert d == pytest.approx(5.0, abs=1e-9) and t == pytest.approx(5.0, abs=1e-9)
    d, t = E.flight_stats(_log([SQUARE] * 10))
    assert d == 0.0 and t == pytest.approx(0.9)


def test_flight_stats_random_walk(rng):
    xy = np.cumsum(rng.normal(0, 0.1, (40, 2)), axis=0)
    poses = [Pose(x, y, 1.8, 0.0) for x, y in xy]
    d, _ = E.flight_stats(_log([SQUARE] * 40, poses))
    ref = sum(math.hypot(*(xy[i + 1] - xy[i])) for i in range(39))
    assert d == pytest.approx(ref, abs=1e-12)


# -- reports -----------------------------------------------------------------


def _report_logs(rng):
    logs = []
    for pose in ("left", "right"):
        for r in range(4):
            n = int(rng.integers(35, 60))
            poses = [Pose(*rng.normal(0, 1, 2), 1.8, 0.0) for _ in range(n)]
            outcome = "timeout" if r == 3 else "converged_hard"
            logs.append(_log([SQUARE + rng.normal(0, 2, (4, 2)) for _ in range(n)], poses, label=pose, outcome=outcome, run=r))
    return logs


def test_report_rows_and_permutation_invariance(rng):
    logs = _report_logs(rng)
    rep = E.build_report(logs, SQUARE, ["right", "left"])
    assert [r["pose"] for r in rep.rows] == ["right", "left"]
    row = rep.row("left", "teacher")
    assert row["runs"] == 4 and row["converged"] == 3 and row["convergence_rate"] == 0.75
    conv = [lg for lg in logs if lg.pose_label == "left" and lg.converged]
    assert row["time_s"] == pytest.approx(np.mean([E.flight_stats(lg)[1] for lg in conv]))
    csv1 = rep.to_csv()
    for seed in range(5):
        perm = np.random.default_rng(seed).permutation(len(logs))
        assert E.build_report([logs[i] for i in perm], SQUARE, ["right", "left"]).to_csv() == csv1
    assert csv1.splitlines()[0].split(",") == E.REPORT_COLUMNS


# -- timing ------------------------------------------------------------------


def test_timing_with_sleep_mock():
    rep = E.timing_benchmark({"sleep": lambda _: time.sleep(0.005)}, [None] * 2, trials=5, warmup=1)
    r = rep.row("sleep")
    assert 4.5 <= r.avg_ms <= 8.0
    assert r.min_ms <= r.median_ms <= r.max_ms
    assert abs(r.fps - 1000.0 / r.avg_ms) <= 1e-9


def test_timing_with_fake_clock():
    ticks = iter(range(0, 10_000))

    def clock():
        return next(ticks) * 0.004  # every clock read advances 4 ms

    rep = E.timing_benchmark({"a": lambda _: None, "b": lambda _: None}, [0, 1], trials=3, warmup=0, clock=clock)
    assert rep.row("a").avg_ms == pytest.approx(2.0)
    assert rep.row("b").fps == pytest.approx(500.0)
    text = rep.to_csv().splitlines()
    assert text[0].startswith("# trials=3") and text[1].split(",") == E.TIMING_COLUMNS


def test_timing_rejects_empty():
    with pytest.raises(ValueError):
        E.timing_benchmark({"a": lambda _: None}, [])


def test_trajectory_svg(rng):
    logs = _report_logs(rng)
    svg = E.trajectory_svg(logs, SQUARE / 10.0)
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
    assert "left" in svg and "right" in svg
