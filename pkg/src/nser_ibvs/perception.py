"""Segmentation oracle and the keypoint stabilization pipeline.

Masks are boolean numpy arrays indexed ``mask[v, u]`` (row-major, height x
width). Pixel centers are at integer coordinates, so a pixel at column ``u``
and row ``v`` is the point ``(u, v)``.

Pipeline per frame::

    mask, gt_front, gt_back = rasterize_car(...)
    c = centroid(mask)
    split = split_mask(mask, c, front_hint)
    corners = min_area_obb(mask)
    kps = order_keypoints(corners, split)
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camgeo import CameraExtrinsics, CameraIntrinsics, CarModel, ImagePoint, Pose
from .errors import (
    AmbiguousAssignment,
    DegenerateHint,
    DegenerateMask,
    EmptyMask,
    ShapeMismatch,
    TargetNotVisible,
)

NEAR_PLANE = 1e-3
BCE_EPS = 1e-7
LABELS = ("fl", "fr", "br", "bl")


@dataclass(frozen=True)
class SplitResult:
    front: np.ndarray
    back: np.ndarray


@dataclass(frozen=True)
class KeypointSet:
    """Four image points in canonical clockwise order fl, fr, br, bl."""

    points: np.ndarray  # (4, 2)

    @property
    def fl(self) -> ImagePoint:
        return ImagePoint(*self.points[0])

    @property
    def fr(self) -> ImagePoint:
        return ImagePoint(*self.points[1])

    @property
    def br(self) -> ImagePoint:
        return ImagePoint(*self.points[2])

    @property
    def bl(self) -> ImagePoint:
        return ImagePoint(*self.points[3])

    def as_vector(self) -> np.ndarray:
        return self.points.reshape(-1)

    @classmethod
    def from_vector(cls, vec) -> "KeypointSet":
        return cls(np.asarray(vec, dtype=float).reshape(4, 2).copy())


@dataclass(frozen=True)
class SplitterLossWeights:
    w_bce_front: float = 1.0
    w_bce_back: float = 1.0
    w_partition: float = 1.0
    w_overlap: float = 1.0
    w_coverage: float = 1.0

    def as_tuple(self):
        return (self.w_bce_front, self.w_bce_back, self.w_partition, self.w_overlap, self.w_coverage)

    @classmethod
    def scheduled(cls, epoch: int, n_epochs: int, start=(1, 1, 0.1, 0.1, 0.1), end=(1, 1, 1, 1, 1)):
        """Linear ramp from ``start`` to ``end`` over ``n_epochs``."""
        if n_epochs <= 1:
            t = 1.0
        else:
            t = min(max(epoch / (n_epochs - 1), 0.0), 1.0)
        w = [a + (b - a) * t for a, b in zip(start, end)]
        if min(w) < 0:
            raise ValueError("loss weights must be nonnegative")
        return cls(*w)


def signed_area(points) -> float:
    """Signed polygon area with the image v axis flipped to point up.

    A sequence that runs clockwise on screen (v down) has negative area.
    """
    p = np.asarray(points, dtype=float)
    u, v = p[:, 0], -p[:, 1]
    return 0.5 * float(np.sum(u * np.roll(v, -1) - np.roll(u, -1) * v))


# --------------------------------------------------------------------------
# segmentation oracle


def _clip_near(poly_cam: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a camera-frame polygon against z >= NEAR_PLANE."""
    out = []
    n = len(poly_cam)
    for i in range(n):
        a, b = poly_cam[i], poly_cam[(i + 1) % n]
        ina, inb = a[2] >= NEAR_PLANE, b[2] >= NEAR_PLANE
        if ina:
            out.append(a)
        if ina != inb:
            t = (NEAR_PLANE - a[2]) / (b[2] - a[2])
            out.append(a + t * (b - a))
    return np.array(out)


def _project_polygon(poly_world, extr, intr):
    pc = _clip_near(extr.apply(poly_world))
    if len(pc) < 3:
        return None
    return np.column_stack([intr.u0 + intr.f * pc[:, 0] / pc[:, 2], intr.v0 + intr.f * pc[:, 1] / pc[:, 2]])


def _fill_box(poly_uv, width: int, height: int):
    """Inside test on the polygon's clipped bounding box: (inside, uu, vv, (v_lo, u_lo)) or None."""
    if poly_uv is None or len(poly_uv) < 3:
        return None
    u_lo = max(int(math.floor(poly_uv[:, 0].min())), 0)
    u_hi = min(int(math.ceil(poly_uv[:, 0].max())), width - 1)
    v_lo = max(int(math.floor(poly_uv[:, 1].min())), 0)
    v_hi = min(int(math.ceil(poly_uv[:, 1].max())), height - 1)
    if u_lo > u_hi or v_lo > v_hi:
        return None
    orient = 1.0 if signed_area(poly_uv) < 0 else -1.0
    uu = np.arange(u_lo, u_hi + 1, dtype=float)[None, :]
    vv = np.arange(v_lo, v_hi + 1, dtype=float)[:, None]
    inside = np.ones((v_hi - v_lo + 1, u_hi - u_lo + 1), dtype=bool)
    n = len(poly_uv)
    for i in range(n):
        (ax, ay), (bx, by) = poly_uv[i], poly_uv[(i + 1) % n]
        inside &= orient * ((bx - ax) * (vv - ay) - (by - ay) * (uu - ax)) >= 0
    return inside, uu, vv, (v_lo, u_lo)


def fill_convex_polygon(poly_uv: np.ndarray, width: int, height: int) -> np.ndarray:
    """Boolean mask of pixel centers inside (or on) a convex polygon."""
    mask = np.zeros((height, width), dtype=bool)
    box = _fill_box(poly_uv, width, height)
    if box is not None:
        inside, _, _, (v0, u0) = box
        mask[v0 : v0 + inside.shape[0], u0 : u0 + inside.shape[1]] = inside
    return mask


def rasterize_car(car: CarModel, car_pose: Pose, extr: CameraExtrinsics, intr: CameraIntrinsics):
    """Render the car footprint as (mask, gt_front, gt_back).

    The front/back ground truth splits the mask along the projected lateral
    midline of the footprint; pixels exactly on the midline go to the back.
    """
    corners = car.world_corners(car_pose)
    poly = _project_polygon(corners, extr, intr)
    box = _fill_box(poly, intr.width, intr.height)
    if box is None or not box[0].any():
        raise TargetNotVisible("car footprint does not cover any pixel")
    inside, uu, vv, (v0, u0) = box
    mid_left = 0.5 * (corners[0] + corners[3])
    mid_right = 0.5 * (corners[1] + corners[2])
    center = 0.5 * (mid_left + mid_right)
    front_pt = center + 1e-3 * (0.5 * (corners[0] + corners[1]) - center)
    pc = extr.apply(np.vstack([mid_left, mid_right, front_pt]))
    if np.all(pc[:, 2] > NEAR_PLANE):
        n = pc[:, :2] / pc[:, 2:3]
        uv = np.column_stack([intr.u0 + intr.f * n[:, 0], intr.v0 + intr.f * n[:, 1]])
        a, b, p = uv
        side = np.sign((b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]))
        is_front = side * ((b[0] - a[0]) * (vv - a[1]) - (b[1] - a[1]) * (uu - a[0])) > 0
    else:
        # midline crosses the near plane; classify pixels through their ground-plane rays
        gu, gv = np.broadcast_arrays(uu, vv)
        is_front = _front_by_ray(gu.ravel(), gv.ravel(), car, car_pose, extr, intr).reshape(inside.shape)
    h, w = inside.shape
    mask = np.zeros((intr.height, intr.width), dtype=bool)
    front = np.zeros_like(mask)
    back = np.zeros_like(mask)
    mask[v0 : v0 + h, u0 : u0 + w] = inside
    front[v0 : v0 + h, u0 : u0 + w] = inside & is_front
    back[v0 : v0 + h, u0 : u0 + w] = inside & ~is_front
    return mask, front, back


def _front_by_ray(uu, vv, car, car_pose, extr, intr):
    rays = np.column_stack([(uu - intr.u0) / intr.f, (vv - intr.v0) / intr.f, np.ones(len(uu))])
    rw = rays @ extr.rotation
    c = extr.center()
    t = (car_pose.z - c[2]) / rw[:, 2]
    ground = c[:2] + t[:, None] * rw[:, :2]
    axis = car.world_front_axis(car_pose)[:2]
    return (ground - np.array([car_pose.x, car_pose.y])) @ axis > 0


def front_hint(car: CarModel, car_pose: Pose, extr: CameraExtrinsics, intr: CameraIntrinsics) -> ImagePoint:
    """Projected midpoint of the car's front edge, used as the splitting hint.

    When that point is behind the camera, a point a short way along the
    front axis from the car center is used instead; only the direction
    from the centroid matters to ``split_mask``.
    """
    corners = car.world_corners(car_pose)
    front_mid = 0.5 * (corners[0] + corners[1])
    center = corners.mean(axis=0)
    for frac in (1.0, 0.25, 0.05):
        p = center + frac * (front_mid - center)
        pc = extr.apply(p)
        if pc[2] > NEAR_PLANE:
            return ImagePoint(intr.u0 + intr.f * pc[0] / pc[2], intr.v0 + intr.f * pc[1] / pc[2])
    raise TargetNotVisible("car front lies behind the camera")


# --------------------------------------------------------------------------
# mask operations


def _crop(mask: np.ndarray):
    """Bounding-box view of the set pixels and its (row, col) offset; None when empty."""
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        return None, (0, 0)
    cols = np.flatnonzero(mask[rows[0] : rows[-1] + 1].any(axis=0))
    r0, c0 = int(rows[0]), int(cols[0])
    return mask[r0 : int(rows[-1]) + 1, c0 : int(cols[-1]) + 1], (r0, c0)


def centroid(mask: np.ndarray) -> ImagePoint:
    """Mask centroid from raw image moments: (m10/m00, m01/m00)."""
    sub, (r0, c0) = _crop(np.asarray(mask, dtype=bool))
    if sub is None:
        raise EmptyMask("centroid of an empty mask")
    col = np.count_nonzero(sub, axis=0)
    row = np.count_nonzero(sub, axis=1)
    m00 = int(col.sum())
    m10 = float(col @ np.arange(c0, c0 + sub.shape[1]))
    m01 = float(row @ np.arange(r0, r0 + sub.shape[0]))
    return ImagePoint(m10 / m00, m01 / m00)


def split_mask(mask: np.ndarray, centroid_pt, front_hint_pt) -> SplitResult:
    """Split a mask by the sign of the dot product with the centroid->hint direction.

    Pixels with a strictly positive projection are front, all others back.
    """
    mask = np.asarray(mask, dtype=bool)
    sub, (r0, c0) = _crop(mask)
    if sub is None:
        raise EmptyMask("cannot split an empty mask")
    cu, cv = centroid_pt
    du, dv = front_hint_pt[0] - cu, front_hint_pt[1] - cv
    if math.hypot(du, dv) < 1e-6:
        raise DegenerateHint("front hint coincides with the centroid")
    uu = np.arange(c0, c0 + sub.shape[1], dtype=float)[None, :]
    vv = np.arange(r0, r0 + sub.shape[0], dtype=float)[:, None]
    front = np.zeros_like(mask)
    front[r0 : r0 + sub.shape[0], c0 : c0 + sub.shape[1]] = sub & ((uu - cu) * du + (vv - cv) * dv > 0)
    return SplitResult(front=front, back=mask & ~front)


def splitter_loss(pred_front, pred_back, gt: SplitResult, original, w: SplitterLossWeights | None = None) -> dict:
    """Loss terms for a front/back mask splitter.

    Returns a dict with ``bce_front``, ``bce_back``, ``partition``, ``overlap``,
    ``coverage`` and their weighted ``total``.
    """
    w = w or SplitterLossWeights()
    pf = np.asarray(pred_front, dtype=float)
    pb = np.asarray(pred_back, dtype=float)
    gf = np.asarray(gt.front, dtype=float)
    gb = np.asarray(gt.back, dtype=float)
    orig = np.asarray(original, dtype=float)
    shapes = {pf.shape, pb.shape, gf.shape, gb.shape, orig.shape}
    if len(shapes) != 1:
        raise ShapeMismatch(f"raster shapes differ: {sorted(shapes)}")

    # Pixels where every raster is zero add a known constant (bce) or nothing
    # (other terms), so only the joint bounding box is evaluated.
    n = pf.size
    support = (pf != 0) | (pb != 0) | (gf != 0) | (gb != 0) | (orig != 0)
    rows, cols = np.flatnonzero(support.any(axis=1)), np.flatnonzero(support.any(axis=0))
    if rows.size:
        box = np.s_[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]
        pf, pb, gf, gb, orig = pf[box], pb[box], gf[box], gb[box], orig[box]
    outside = n - (pf.size if rows.size else 0)
    bce_zero = -np.log(1.0 - BCE_EPS)

    def bce(p, t):
        p = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
        inside = np.sum(-(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))) if rows.size else 0.0
        return float((inside + outside * bce_zero) / n)

    union = pf + pb - pf * pb
    terms = {
        "bce_front": bce(pf, gf),
        "bce_back": bce(pb, gb),
        "partition": float(np.sum(np.abs(pf + pb - orig)) / n),
        "overlap": float(np.sum(pf * pb) / n),
        "coverage": float((np.sum(np.maximum(union - orig, 0.0)) + np.sum(np.maximum(orig - union, 0.0))) / n),
    }
    weights = w.as_tuple()
    terms["total"] = float(sum(wi * terms[k] for wi, k in zip(weights, ("bce_front", "bce_back", "partition", "overlap", "coverage"))))
    return terms


# --------------------------------------------------------------------------
# oriented bounding box


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain; returns hull vertices counter-clockwise in (x, y), no collinear points."""
    pts = [tuple(p) for p in np.unique(np.asarray(points, dtype=float), axis=0).tolist()]
    if len(pts) < 3:
        return np.array(pts, dtype=float).reshape(-1, 2)

    def half(seq):
        chain = []
        for p in seq:
            while len(chain) >= 2:
                (ox, oy), (ax, ay) = chain[-2], chain[-1]
                if (ax - ox) * (p[1] - oy) - (ay - oy) * (p[0] - ox) > 0:
                    break
                chain.pop()
            chain.append(p)
        return chain

    lower = half(pts)
    upper = half(reversed(pts))
    return np.array(lower[:-1] + upper[:-1], dtype=float)


def _row_extremes(mask: np.ndarray) -> np.ndarray:
    """Leftmost and rightmost set pixel of each row: a superset of the hull vertices."""
    sub, (r0, c0) = _crop(mask)
    keep = sub.any(axis=1)
    sub = sub[keep]
    rows = np.arange(r0, r0 + len(keep))[keep]
    first = sub.argmax(axis=1) + c0
    last = sub.shape[1] - 1 - sub[:, ::-1].argmax(axis=1) + c0
    return np.vstack([np.column_stack([first, rows]), np.column_stack([last, rows])]).astype(float)


def min_area_rect(points: np.ndarray) -> np.ndarray:
    """Minimum-area enclosing rectangle of a 2-D point set via rotating calipers.

    Every hull edge direction is tried as a rectangle side; returns the (4, 2)
    corners of the best one.
    """
    hull = convex_hull(points)
    if len(hull) < 3:
        raise DegenerateMask("need at least three non-collinear points")
    edges = np.roll(hull, -1, axis=0) - hull
    lengths = np.hypot(edges[:, 0], edges[:, 1])
    dirs = edges / lengths[:, None]
    normals = np.column_stack([-dirs[:, 1], dirs[:, 0]])
    proj_d = hull @ dirs.T  # (n_pts, n_edges)
    proj_n = hull @ normals.T
    dmin, dmax = proj_d.min(axis=0), proj_d.max(axis=0)
    nmin, nmax = proj_n.min(axis=0), proj_n.max(axis=0)
    areas = (dmax - dmin) * (nmax - nmin)
    if areas.max() <= 0:
        raise DegenerateMask("points are collinear")
    k = int(np.argmin(areas))
    d, n = dirs[k], normals[k]
    return np.array([
        dmin[k] * d + nmin[k] * n,
        dmax[k] * d + nmin[k] * n,
        dmax[k] * d + nmax[k] * n,
        dmin[k] * d + nmax[k] * n,
    ])


def min_area_obb(mask: np.ndarray) -> np.ndarray:
    """Minimum-area rectangle around all set pixel centers, as (4, 2) (u, v) corners."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise DegenerateMask("empty mask")
    return min_area_rect(_row_extremes(mask))


def rect_area(corners) -> float:
    return abs(signed_area(corners))


# --------------------------------------------------------------------------
# keypoint ordering


def clockwise(points) -> np.ndarray:
    """Sort points clockwise on screen (v down) around their mean, starting anywhere."""
    p = np.asarray(points, dtype=float)
    c = p.mean(axis=0)
    ang = np.arctan2(p[:, 1] - c[1], p[:, 0] - c[0])
    return p[np.argsort(ang, kind="stable")]


def _canonical_from_cycle(cycle: np.ndarray, is_front: np.ndarray) -> KeypointSet:
    for shift in range(4):
        idx = [(shift + i) % 4 for i in range(4)]
        if is_front[idx[0]] and is_front[idx[1]]:
            return KeypointSet(cycle[idx].copy())
    raise AmbiguousAssignment("front corners are not adjacent")


def order_keypoints(corners, split: SplitResult) -> KeypointSet:
    """Label OBB corners fl, fr, br, bl using the front/back mask centroids."""
    if not split.front.any() or not split.back.any():
        raise AmbiguousAssignment("front or back mask is empty")
    cf = np.array(centroid(split.front))
    cb = np.array(centroid(split.back))
    cyc = clockwise(corners)
    df = np.linalg.norm(cyc - cf, axis=1)
    db = np.linalg.norm(cyc - cb, axis=1)
    is_front = df < db
    if int(is_front.sum()) != 2:
        raise AmbiguousAssignment(f"{int(is_front.sum())} corners are nearer the front centroid")
    return _canonical_from_cycle(cyc, is_front)


def order_like_previous(corners, previous: KeypointSet) -> KeypointSet:
    """Fallback labeling: the cyclic rotation of the corners closest to the previous frame."""
    cyc = clockwise(corners)
    best, best_cost = None, math.inf
    for shift in range(4):
        cand = np.roll(cyc, -shift, axis=0)
        cost = float(np.sum(np.linalg.norm(cand - previous.points, axis=1)))
        if cost < best_cost:
            best, best_cost = cand, cost
    return KeypointSet(best.copy())


def best_permutation(previous: np.ndarray, current: np.ndarray) -> tuple:
    """Assignment of current points to previous labels minimizing total displacement."""
    best, best_cost = None, math.inf
    for perm in itertools.permutations(range(len(previous))):
        cost = float(np.sum(np.linalg.norm(current[list(perm)] - previous, axis=1)))
        if cost < best_cost - 1e-12:
            best, best_cost = perm, cost
    return best


# --------------------------------------------------------------------------
# PGM / CSV interfaces


def write_pgm(path, mask: np.ndarray) -> None:
    """Write a boolean mask as a binary (P5) PGM with values 0/255."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write((mask.astype(np.uint8) * 255).tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a P5 PGM (maxval < 256); nonzero pixels are set."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while data[pos : pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        if pos >= len(data):
            raise ValueError(f"{path}: truncated PGM header")
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise ValueError(f"{path}: 16-bit PGM not supported")
    pixels = np.frombuffer(data[pos + 1 : pos + 1 + w * h], dtype=np.uint8)
    if pixels.size != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return pixels.reshape(h, w) > 0


KEYPOINT_CSV_HEADER = ["frame"] + [f"{lab}_{ax}" for lab in LABELS for ax in ("u", "v")]


def keypoint_row(frame: int, kps: KeypointSet) -> list:
    return [frame] + [repr(float(x)) for x in kps.as_vector()]
