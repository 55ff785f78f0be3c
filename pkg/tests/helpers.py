"""Shared sampling utilities for the test suite."""

import math

import numpy as np

from nser_ibvs.camgeo import Pose


def random_drone_pose(scene, rng, altitude=1.8, dist=(1.6, 3.5), yaw_jitter_deg=15.0):
    """A drone pose somewhere around the car, roughly facing it."""
    b = rng.uniform(-math.pi, math.pi)
    d = rng.uniform(*dist)
    cx, cy = scene.car_pose.x, scene.car_pose.y
    x, y = cx + d * math.cos(b), cy + d * math.sin(b)
    yaw = math.atan2(cy - y, cx - x) + math.radians(rng.uniform(-yaw_jitter_deg, yaw_jitter_deg))
    return Pose(x, y, altitude, yaw)


def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def random_convex_quad(rng, center=(0.0, 0.0), scale=50.0):
    """Random strictly convex quadrilateral in cyclic order, not too thin."""
    while True:
        ang = np.sort(rng.uniform(0, 2 * math.pi, 4))
        r = scale * rng.uniform(0.5, 1.0, 4)
        q = np.column_stack([center[0] + r * np.cos(ang), center[1] + r * np.sin(ang)])
        turns = [_cross(q[i], q[(i + 1) % 4], q[(i + 2) % 4]) for i in range(4)]
        if min(turns) > 0.05 * scale * scale:
            return q


def sweep_obb_area(points, step_deg=1.0):
    """Smallest axis-aligned box area over rotations of the point set in fixed steps."""
    pts = np.asarray(points, dtype=float)
    best = math.inf
    for deg in np.arange(0.0, 180.0, step_deg):
        t = math.radians(deg)
        r = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
        q = pts @ r.T
        best = min(best, float(np.ptp(q[:, 0]) * np.ptp(q[:, 1])))
    return best


def pixel_centers(mask):
    v, u = np.nonzero(mask)
    return np.column_stack([u, v]).astype(float)


def inside_convex(poly, pts):
    """Vectorized point-in-convex-polygon test (any orientation)."""
    poly = np.asarray(poly, dtype=float)
    n = len(poly)
    signs = []
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        signs.append((b[0] - a[0]) * (pts[:, 1] - a[1]) - (b[1] - a[1]) * (pts[:, 0] - a[0]))
    s = np.array(signs)
    return np.all(s >= 0, axis=0) | np.all(s <= 0, axis=0)


def monte_carlo_iou(a, b, n, rng):
    both = np.vstack([a, b])
    lo, hi = both.min(axis=0), both.max(axis=0)
    pts = rng.uniform(lo, hi, size=(n, 2))
    ia, ib = inside_convex(a, pts), inside_convex(b, pts)
    union = np.count_nonzero(ia | ib)
    return np.count_nonzero(ia & ib) / union if union else 0.0


def kinematic_interaction(p, Z, intr):
    """Oracle: image velocity of a static point under each unit camera twist.

    The point moves in the camera frame as dP = -v - w x P; the pixel
    velocity is the derivative of the pinhole projection along it.
    """
    x, y = (p[0] - intr.u0) / intr.f, (p[1] - intr.v0) / intr.f
    P = np.array([x * Z, y * Z, Z])
    out = np.zeros((2, 6))
    for k in range(6):
        v = np.zeros(3)
        w = np.zeros(3)
        (v if k < 3 else w)[k % 3] = 1.0
        dP = -v - np.cross(w, P)
        out[0, k] = intr.f * (dP[0] * P[2] - P[0] * dP[2]) / P[2] ** 2
        out[1, k] = intr.f * (dP[1] * P[2] - P[1] * dP[2]) / P[2] ** 2
    return out


def gauss_solve(a, b):
    """Plain Gaussian elimination with partial pivoting (lists of floats)."""
    n = len(a)
    m = [list(map(float, a[i])) + [float(b[i])] for i in range(n)]
    for col in range(n):
        piv = max(range(col, n), key=lambda r: abs(m[r][col]))
        m[col], m[piv] = m[piv], m[col]
        for r in range(col + 1, n):
            f = m[r][col] / m[col][col]
            for c in range(col, n + 1):
                m[r][c] -= f * m[col][c]
    x = [0.0] * n
    for r in range(n - 1, -1, -1):
        x[r] = (m[r][n] - sum(m[r][c] * x[c] for c in range(r + 1, n))) / m[r][r]
    return np.array(x)
