import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import pixel_centers, random_drone_pose, sweep_obb_area
from nser_ibvs import perception as P
from nser_ibvs.camgeo import CarModel, Pose, camera_from_pose, project_many
from nser_ibvs.errors import AmbiguousAssignment, DegenerateHint, DegenerateMask, EmptyMask, ShapeMismatch
from nser_ibvs.simkit import perceive, render


def _rect_mask(h, w, r0, r1, c0, c1):
    m = np.zeros((h, w), dtype=bool)
    m[r0:r1, c0:c1] = True
    return m


# -- rasterization ---------------------------------------------------------


def _ground_oracle(scene, drone):
    """Per-pixel oracle: intersect every pixel ray with the ground and test the car rectangle."""
    extr = camera_from_pose(drone, scene.gimbal)
    intr = scene.intr
    vv, uu = np.mgrid[0 : intr.height, 0 : intr.width].astype(float)
    rays = np.stack([(uu - intr.u0) / intr.f, (vv - intr.v0) / intr.f, np.ones_like(uu)], axis=-1)
    rw = rays @ extr.rotation
    c = extr.center()
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (scene.car_pose.z - c[2]) / rw[..., 2]
    g = c[:2] + t[..., None] * rw[..., :2]
    rel = g - np.array([scene.car_pose.x, scene.car_pose.y])
    ax = scene.car.world_front_axis(scene.car_pose)[:2]
    side = np.array([-ax[1], ax[0]])
    a, s = rel @ ax, rel @ side
    inside = (t > 0) & (np.abs(a) <= scene.car.length / 2) & (np.abs(s) <= scene.car.width / 2)
    return inside, inside & (a > 0)


def test_rasterize_matches_ground_oracle(scene):
    rng = np.random.default_rng(5)
    for _ in range(10):
        drone = random_drone_pose(scene, rng)
        frame = render(scene, drone)
        ref, ref_front = _ground_oracle(scene, drone)
        # only pixels whose center sits on the footprint boundary may disagree
        diff = frame.mask ^ ref
        assert diff.sum() <= 0.02 * ref.sum() + 4
        fdiff = frame.gt_front ^ ref_front
        assert fdiff.sum() <= 0.03 * ref.sum() + 4
        assert not np.any(frame.gt_front & frame.gt_back)
        assert np.array_equal(frame.gt_front | frame.gt_back, frame.mask)


def test_fill_convex_polygon_orientation_independent():
    quad = np.array([[2.0, 2.0], [8.0, 3.0], [7.0, 8.0], [1.5, 6.0]])
    a = P.fill_convex_polygon(quad, 12, 10)
    b = P.fill_convex_polygon(quad[::-1], 12, 10)
    assert np.array_equal(a, b)
    sq = P.fill_convex_polygon(np.array([[1.0, 1.0], [3.0, 1.0], [3.0, 3.0], [1.0, 3.0]]), 5, 5)
    assert np.array_equal(sq, _rect_mask(5, 5, 1, 4, 1, 4))


def test_signed_area_sign():
    cw_on_screen = [[0, 0], [1, 0], [1, 1], [0, 1]]  # v down: right, then down
    assert P.signed_area(cw_on_screen) == pytest.approx(-1.0)
    assert P.signed_area(cw_on_screen[::-1]) == pytest.approx(1.0)


# -- centroid and split ----------------------------------------------------


@given(st.integers(1, 20), st.integers(1, 20), st.integers(0, 10), st.integers(0, 10))
def test_centroid_of_rectangle(h, w, r0, c0):
    m = _rect_mask(40, 40, r0, r0 + h, c0, c0 + w)
    u, v = P.centroid(m)
    assert u == pytest.approx(c0 + (w - 1) / 2)
    assert v == pytest.approx(r0 + (h - 1) / 2)


def test_centroid_matches_moment_oracle(rng):
    m = rng.random((30, 50)) < 0.3
    pts = pixel_centers(m)
    assert np.allclose(P.centroid(m), pts.mean(axis=0), atol=1e-12)


def test_centroid_empty_raises():
    with pytest.raises(EmptyMask):
        P.centroid(np.zeros((4, 4), dtype=bool))


def test_split_partition_and_antisymmetry(rng):
    for _ in range(50):
        m = rng.random((25, 35)) < 0.5
        c = P.centroid(m)
        hint = (c[0] + rng.normal(), c[1] + rng.normal())
        s1 = P.split_mask(m, c, hint)
        assert not np.any(s1.front & s1.back)
        assert np.array_equal(s1.front | s1.back, m)
        s2 = P.split_mask(m, c, (2 * c[0] - hint[0], 2 * c[1] - hint[1]))
        # reversing the hint swaps the halves; only pixels on the dividing line stay back in both
        assert not np.any(s1.front & s2.front)
        on_line = s1.back & s2.back
        uu, vv = np.meshgrid(np.arange(35), np.arange(25))
        dots = (uu - c[0]) * (hint[0] - c[0]) + (vv - c[1]) * (hint[1] - c[1])
        assert np.all(np.abs(dots[on_line]) < 1e-9)


def test_split_degenerate_hint():
    m = _rect_mask(5, 5, 1, 4, 1, 4)
    with pytest.raises(DegenerateHint):
        P.split_mask(m, (2.0, 2.0), (2.0, 2.0))


def test_split_horizontal_example():
    m = _rect_mask(4, 6, 0, 4, 0, 6)
    s = P.split_mask(m, P.centroid(m), (10.0, 1.5))
    assert np.array_equal(s.front, _rect_mask(4, 6, 0, 4, 3, 6))


# -- splitter loss ---------------------------------------------------------


def _loss_oracle(pf, pb, gf, gb, orig):
    n = pf.size
    acc = dict(bce_front=0.0, bce_back=0.0, partition=0.0, overlap=0.0, coverage=0.0)
    for a, b, f, k, o in zip(pf.ravel(), pb.ravel(), gf.ravel(), gb.ravel(), orig.ravel()):
        ca, cb = min(max(a, 1e-7), 1 - 1e-7), min(max(b, 1e-7), 1 - 1e-7)
        acc["bce_front"] -= f * math.log(ca) + (1 - f) * math.log(1 - ca)
        acc["bce_back"] -= k * math.log(cb) + (1 - k) * math.log(1 - cb)
        acc["partition"] += abs(a + b - o)
        acc["overlap"] += a * b
        u = a + b - a * b
        acc["coverage"] += max(u - o, 0) + max(o - u, 0)
    return {k: v / n for k, v in acc.items()}


def test_splitter_loss_per_pixel_oracle(rng):
    shape = (6, 7)
    pf, pb = rng.random(shape), rng.random(shape)
    orig = rng.random(shape) < 0.6
    gf = orig & (rng.random(shape) < 0.5)
    gb = orig & ~gf
    got = P.splitter_loss(pf, pb, P.SplitResult(gf, gb), orig)
    ref = _loss_oracle(pf, pb, gf.astype(float), gb.astype(float), orig.astype(float))
    for k, v in ref.items():
        assert got[k] == pytest.approx(v, rel=1e-12, abs=1e-15)
    assert got["total"] == pytest.approx(sum(ref.values()), rel=1e-12)


def test_splitter_loss_zero_on_ground_truth(rng):
    orig = rng.random((9, 9)) < 0.5
    gf = orig & (rng.random((9, 9)) < 0.5)
    gt = P.SplitResult(gf, orig & ~gf)
    t = P.splitter_loss(gt.front.astype(float), gt.back.astype(float), gt, orig)
    assert t["partition"] == 0.0 and t["overlap"] == 0.0 and t["coverage"] == 0.0


def test_splitter_loss_shape_mismatch():
    z = np.zeros((3, 3))
    with pytest.raises(ShapeMismatch):
        P.splitter_loss(z, np.zeros((3, 4)), P.SplitResult(z, z), z)


def test_loss_weight_schedule():
    w0 = P.SplitterLossWeights.scheduled(0, 11)
    w1 = P.SplitterLossWeights.scheduled(10, 11)
    assert w0.as_tuple() == pytest.approx((1, 1, 0.1, 0.1, 0.1))
    assert w1.as_tuple() == pytest.approx((1, 1, 1, 1, 1))


# -- oriented bounding box -------------------------------------------------


@given(st.floats(0, math.pi), st.floats(5, 40), st.floats(3, 20))
@settings(max_examples=60, deadline=None)
def test_obb_of_rotated_rectangle(theta, a, b):
    c, s = math.cos(theta), math.sin(theta)
    rect = np.array([[-a, -b], [a, -b], [a, b], [-a, b]]) @ np.array([[c, -s], [s, c]]).T
    rng = np.random.default_rng(0)
    w = rng.random((200, 2))
    inner = rect[0] + w[:, :1] * (rect[1] - rect[0]) + w[:, 1:] * (rect[3] - rect[0])
    corners = P.min_area_rect(np.vstack([rect, inner]))
    assert P.rect_area(corners) == pytest.approx(4 * a * b, rel=1e-9)


def test_obb_beats_sweep_and_contains_pixels(scene):
    rng = np.random.default_rng(11)
    for _ in range(15):
        m = render(scene, random_drone_pose(scene, rng)).mask
        corners = P.min_area_obb(m)
        pts = pixel_centers(m)
        assert P.rect_area(corners) <= sweep_obb_area(pts) * (1 + 1e-6)
        # every pixel center lies inside the box (up to rounding)
        cyc = P.clockwise(corners)
        for i in range(4):
            a, b = cyc[i], cyc[(i + 1) % 4]
            cross = (b[0] - a[0]) * (pts[:, 1] - a[1]) - (b[1] - a[1]) * (pts[:, 0] - a[0])
            assert np.all(cross >= -1e-6)


def test_convex_hull_square_with_interior():
    pts = np.array([[0, 0], [2, 0], [2, 2], [0, 2], [1, 1], [1, 0]], dtype=float)
    hull = P.convex_hull(pts)
    assert len(hull) == 4
    assert abs(P.signed_area(hull)) == pytest.approx(4.0)


def test_obb_degenerate():
    with pytest.raises(DegenerateMask):
        P.min_area_obb(np.zeros((5, 5), dtype=bool))
    line = np.zeros((5, 5), dtype=bool)
    line[2, :] = True
    with pytest.raises(DegenerateMask):
        P.min_area_obb(line)


# -- keypoint ordering -----------------------------------------------------


def _true_corners(scene, drone):
    extr = camera_from_pose(drone, scene.gimbal)
    return project_many(scene.car.world_corners(scene.car_pose), extr, scene.intr)


def test_keypoints_follow_true_corners(scene):
    rng = np.random.default_rng(3)
    for _ in range(30):
        drone = random_drone_pose(scene, rng)
        kps, _ = perceive(render(scene, drone))
        assert P.best_permutation(_true_corners(scene, drone), kps.points) == (0, 1, 2, 3)
        assert P.signed_area(kps.points) < 0  # clockwise on screen


def test_swapping_front_and_back_rotates_labels(scene):
    rng = np.random.default_rng(4)
    for _ in range(10):
        f = render(scene, random_drone_pose(scene, rng))
        corners = P.min_area_obb(f.mask)
        split = P.split_mask(f.mask, P.centroid(f.mask), f.hint)
        a = P.order_keypoints(corners, split)
        b = P.order_keypoints(corners, P.SplitResult(split.back, split.front))
        assert np.allclose(b.points, np.roll(a.points, 2, axis=0))


def _dilate(m):
    out = m.copy()
    out[1:] |= m[:-1]
    out[:-1] |= m[1:]
    out[:, 1:] |= m[:, :-1]
    out[:, :-1] |= m[:, 1:]
    return out


def _erode(m):
    return ~_dilate(~m)


def test_labels_stable_under_one_pixel_morphology(scene):
    rng = np.random.default_rng(8)
    for _ in range(10):
        f = render(scene, random_drone_pose(scene, rng))
        base, _ = perceive(f)
        for op in (_dilate, _erode):
            m = op(f.mask)
            split = P.split_mask(m, P.centroid(m), f.hint)
            k = P.order_keypoints(P.min_area_obb(m), split)
            assert P.best_permutation(base.points, k.points) == (0, 1, 2, 3)
            assert np.max(np.linalg.norm(k.points - base.points, axis=1)) < 8.0


def test_order_keypoints_empty_half():
    m = _rect_mask(10, 10, 2, 8, 2, 8)
    with pytest.raises(AmbiguousAssignment):
        P.order_keypoints(P.min_area_obb(m), P.SplitResult(m, np.zeros_like(m)))


def test_order_like_previous_picks_nearest_rotation(rng):
    pts = np.array([[0.0, 0.0], [10.0, 0.0], [10.0, 5.0], [0.0, 5.0]])
    prev = P.KeypointSet(np.roll(pts, 1, axis=0) + rng.normal(0, 0.2, (4, 2)))
    out = P.order_like_previous(pts, prev)
    assert np.allclose(out.points, np.roll(pts, 1, axis=0))


def test_keypoint_vector_roundtrip():
    k = P.KeypointSet(np.arange(8.0).reshape(4, 2))
    assert np.array_equal(P.KeypointSet.from_vector(k.as_vector()).points, k.points)
    assert k.br == (4.0, 5.0)


# -- io --------------------------------------------------------------------


def test_pgm_roundtrip(tmp_path, rng):
    m = rng.random((7, 13)) < 0.4
    P.write_pgm(tmp_path / "m.pgm", m)
    assert np.array_equal(P.read_pgm(tmp_path / "m.pgm"), m)


def test_pgm_with_comment(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# note\n2 1\n255\n\x00\xff")
    assert P.read_pgm(tmp_path / "c.pgm").tolist() == [[False, True]]


@pytest.mark.parametrize("data", [b"P5\n2 1\n", b"P5\n2 1\n255\n\x00", b"P2\n1 1\n255\n0"])
def test_pgm_rejects_bad_files(tmp_path, data):
    (tmp_path / "b.pgm").write_bytes(data)
    with pytest.raises(ValueError):
        P.read_pgm(tmp_path / "b.pgm")
