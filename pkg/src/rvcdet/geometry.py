"""Rotated-box geometry in the bird's-eye-view plane.

Box convention: ``l`` runs along the heading ``yaw`` (box-frame x), ``w``
across it (box-frame y), ``h`` vertical and centered on ``cz``.
"""

import math

import numpy as np

__all__ = [
    "wrap_yaw",
    "bev_corners",
    "clip_convex",
    "polygon_area",
    "bev_iou",
    "points_in_box",
]

_AXIS_ALIGNED_EPS = 1e-9


def wrap_yaw(yaw: float) -> float:
    """Map an angle into [-pi, pi)."""
    out = (yaw + math.pi) % (2.0 * math.pi) - math.pi
    # float rounding can land exactly on +pi
    return -math.pi if out >= math.pi else out


def bev_corners(cx, cy, l, w, yaw) -> np.ndarray:
    """Counter-clockwise footprint corners, shape (4, 2)."""
    c, s = math.cos(yaw), math.sin(yaw)
    hl, hw = 0.5 * l, 0.5 * w
    local = ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw))
    return np.array([(cx + c * x - s * y, cy + s * x + c * y) for x, y in local])


def polygon_area(poly) -> float:
    if len(poly) < 3:
        return 0.0
    p = np.asarray(poly, dtype=np.float64)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def clip_convex(subject, clip) -> list:
    """Sutherland-Hodgman: clip polygon ``subject`` by convex CCW polygon ``clip``."""
    out = [tuple(p) for p in subject]
    clip = [tuple(p) for p in clip]
    for i in range(len(clip)):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % len(clip)]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp, out = out, []
        prev = inp[-1]
        s_prev = side(prev)
        for cur in inp:
            s_cur = side(cur)
            if s_cur >= 0.0:
                if s_prev < 0.0:
                    out.append(_intersect(prev, cur, s_prev, s_cur))
                out.append(cur)
            elif s_prev >= 0.0:
                out.append(_intersect(prev, cur, s_prev, s_cur))
            prev, s_prev = cur, s_cur
    return out


def _intersect(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def _key(b):
    return (b.cx, b.cy, b.l, b.w, b.yaw)


def bev_iou(a, b) -> float:
    """IoU of two yaw-rotated footprints; 0 for degenerate or disjoint boxes."""
    # canonical argument order makes the result exactly symmetric
    if _key(b) < _key(a):
        a, b = b, a
    area_a = a.l * a.w
    area_b = b.l * b.w
    if not (area_a > 0.0 and area_b > 0.0):
        return 0.0
    if abs(a.yaw) < _AXIS_ALIGNED_EPS and abs(b.yaw) < _AXIS_ALIGNED_EPS:
        ix = min(a.cx + a.l / 2, b.cx + b.l / 2) - max(a.cx - a.l / 2, b.cx - b.l / 2)
        iy = min(a.cy + a.w / 2, b.cy + b.w / 2) - max(a.cy - a.w / 2, b.cy - b.w / 2)
        inter = max(ix, 0.0) * max(iy, 0.0)
    else:
        # cheap reject on bounding circles
        ra = 0.5 * math.hypot(a.l, a.w)
        rb = 0.5 * math.hypot(b.l, b.w)
        if math.hypot(a.cx - b.cx, a.cy - b.cy) >= ra + rb:
            return 0.0
        pa = bev_corners(a.cx, a.cy, a.l, a.w, a.yaw)
        pb = bev_corners(b.cx, b.cy, b.l, b.w, b.yaw)
        inter = polygon_area(clip_convex(pa, pb))
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def points_in_box(xyz: np.ndarray, box) -> np.ndarray:
    """Boolean mask of points inside the rotated 3D box, boundaries inclusive."""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    dx = xyz[:, 0] - box.cx
    dy = xyz[:, 1] - box.cy
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    lz = xyz[:, 2] - box.cz
    return (np.abs(lx) <= 0.5 * box.l) & (np.abs(ly) <= 0.5 * box.w) & (np.abs(lz) <= 0.5 * box.h)
