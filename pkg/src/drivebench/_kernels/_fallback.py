"""Pure numpy implementations of the hot geometry kernels.

Every function here has a compiled twin in ``_core.pyx`` with the same
signature and semantics. The compiled versions are preferred when present.
"""

from __future__ import annotations

import numpy as np

_EPS = 1e-12


def ray_boxes(ox, oy, dirs, boxes, max_range):
    """Nearest oriented-box hit for each ray.

    ``dirs`` is (n, 2) unit directions, ``boxes`` is (m, 5) rows of
    (cx, cy, half_x, half_y, yaw). Returns (dist, idx) where idx is -1 and
    dist is ``max_range`` for rays that hit nothing within range.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 5)
    n = dirs.shape[0]
    dist = np.full(n, float(max_range))
    idx = np.full(n, -1, dtype=np.int64)
    if boxes.shape[0] == 0 or n == 0:
        return dist, idx
    c = np.cos(boxes[:, 4])
    s = np.sin(boxes[:, 4])
    rx = ox - boxes[:, 0]
    ry = oy - boxes[:, 1]
    # origin and directions in each box frame
    lox = c * rx + s * ry
    loy = -s * rx + c * ry
    ldx = dirs[:, 0:1] * c + dirs[:, 1:2] * s
    ldy = -dirs[:, 0:1] * s + dirs[:, 1:2] * c

    def slab(lo, ld, half):
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-half - lo) / ld
            t2 = (half - lo) / ld
        par = np.abs(ld) < _EPS
        inside = np.abs(lo) <= half
        tmin = np.where(par, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
        tmax = np.where(par, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
        return tmin, tmax

    txmin, txmax = slab(lox[None, :], ldx, boxes[None, :, 2])
    tymin, tymax = slab(loy[None, :], ldy, boxes[None, :, 3])
    tenter = np.maximum(txmin, tymin)
    texit = np.minimum(txmax, tymax)
    hit = (tenter <= texit) & (texit >= 0.0)
    t = np.where(hit, np.maximum(tenter, 0.0), np.inf)
    best = np.argmin(t, axis=1)
    tb = t[np.arange(n), best]
    ok = tb < max_range
    dist[ok] = tb[ok]
    idx[ok] = best[ok]
    return dist, idx


def ray_region_boundary(ox, oy, dirs, rects, max_range):
    """Distance along each ray to the first boundary of a union of rectangles.

    ``rects`` is (r, 4) rows of (xmin, ymin, xmax, ymax). From inside the
    union this is the exit distance, from outside the entry distance.
    Rays that meet no boundary within range return ``max_range``.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    rects = np.asarray(rects, dtype=np.float64).reshape(-1, 4)
    n = dirs.shape[0]
    out = np.full(n, float(max_range))
    if rects.shape[0] == 0 or n == 0:
        return out
    dx = dirs[:, 0:1]
    dy = dirs[:, 1:2]

    def slab(o, d, lo, hi):
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - o) / d
            t2 = (hi - o) / d
        par = np.abs(d) < _EPS
        inside = (o >= lo) & (o <= hi)
        tmin = np.where(par, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
        tmax = np.where(par, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
        return tmin, tmax

    txmin, txmax = slab(ox, dx, rects[None, :, 0], rects[None, :, 2])
    tymin, tymax = slab(oy, dy, rects[None, :, 1], rects[None, :, 3])
    t0 = np.maximum(txmin, tymin)
    t1 = np.minimum(txmax, tymax)
    valid = t0 <= t1
    inside = (
        (ox >= rects[:, 0]) & (ox <= rects[:, 2]) & (oy >= rects[:, 1]) & (oy <= rects[:, 3])
    ).any()
    if inside:
        cur = np.zeros(n)
        for _ in range(rects.shape[0] + 1):
            reach = valid & (t0 <= cur[:, None] + 1e-9) & (t1 > cur[:, None])
            cand = np.where(reach, t1, -np.inf).max(axis=1)
            nxt = np.maximum(cur, cand)
            if np.array_equal(nxt, cur):
                break
            cur = nxt
        res = cur
    else:
        res = np.where(valid & (t0 > 0.0), t0, np.inf).min(axis=1)
    ok = res < max_range
    out[ok] = res[ok]
    return out


def bev_histogram(points, x_range, y_half, cells, z_split):
    """Bin ego-frame points into a (cells, cells, 2) count grid.

    Row index grows with x (forward), column index grows with y (left).
    Channel 0 holds points with z <= z_split, channel 1 the rest.
    """
    grid = np.zeros((cells, cells, 2), dtype=np.int64)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        return grid
    res_x = x_range / cells
    res_y = 2.0 * y_half / cells
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    keep = (x >= 0.0) & (x < x_range) & (y >= -y_half) & (y < y_half)
    row = np.floor(x[keep] / res_x).astype(np.int64)
    col = np.floor((y[keep] + y_half) / res_y).astype(np.int64)
    row = np.minimum(row, cells - 1)
    col = np.minimum(col, cells - 1)
    ch = (z[keep] > z_split).astype(np.int64)
    flat = (row * cells + col) * 2 + ch
    grid.reshape(-1)[:] = np.bincount(flat, minlength=cells * cells * 2)
    return grid


def project_polyline(px, py, pts, cum, lo, hi):
    """Nearest point on polyline segments ``lo .. hi-1``.

    Returns (arclength, distance, segment index). Ties go to the lowest
    segment index.
    """
    pts = np.asarray(pts, dtype=np.float64)
    cum = np.asarray(cum, dtype=np.float64)
    lo = max(int(lo), 0)
    hi = min(int(hi), pts.shape[0] - 1)
    if hi <= lo:
        d = float(np.hypot(px - pts[lo, 0], py - pts[lo, 1]))
        return float(cum[lo]), d, lo
    a = pts[lo:hi]
    b = pts[lo + 1 : hi + 1]
    ab = b - a
    L2 = (ab * ab).sum(axis=1)
    apx = px - a[:, 0]
    apy = py - a[:, 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(L2 > 0.0, (apx * ab[:, 0] + apy * ab[:, 1]) / L2, 0.0)
    t = np.clip(t, 0.0, 1.0)
    qx = a[:, 0] + t * ab[:, 0]
    qy = a[:, 1] + t * ab[:, 1]
    d2 = (px - qx) ** 2 + (py - qy) ** 2
    k = int(np.argmin(d2))
    s = cum[lo + k] + t[k] * np.sqrt(L2[k])
    return float(s), float(np.sqrt(d2[k])), lo + k


def _corners(b):
    c, s = np.cos(b[4]), np.sin(b[4])
    ax = np.array([c, s]) * b[2]
    ay = np.array([-s, c]) * b[3]
    ctr = np.array([b[0], b[1]])
    return np.array([ctr + ax + ay, ctr - ax + ay, ctr - ax - ay, ctr + ax - ay])


def obb_overlap(box, boxes):
    """Separating-axis overlap test of one oriented box against many."""
    box = np.asarray(box, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 5)
    out = np.zeros(boxes.shape[0], dtype=bool)
    ca = _corners(box)
    for j in range(boxes.shape[0]):
        cb = _corners(boxes[j])
        sep = False
        for yaw in (box[4], boxes[j, 4]):
            for axis in (np.array([np.cos(yaw), np.sin(yaw)]), np.array([-np.sin(yaw), np.cos(yaw)])):
                pa = ca @ axis
                pb = cb @ axis
                if pa.max() < pb.min() or pb.max() < pa.min():
                    sep = True
                    break
            if sep:
                break
        out[j] = not sep
    return out


def im2col_s2(x):
    """3x3, stride 2, pad 1 patches of NHWC input: (B, H, W, C) -> (B*Ho*Wo, 9*C).

    Columns are ordered (row offset, column offset, channel).
    """
    B, H, W, C = x.shape
    Ho, Wo = (H - 1) // 2 + 1, (W - 1) // 2 + 1
    xp = np.zeros((B, H + 2, W + 2, C), dtype=x.dtype)
    xp[:, 1:H + 1, 1:W + 1] = x
    cols = np.empty((B, Ho, Wo, 9, C), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, :, :, 3 * i + j] = xp[:, i:i + 2 * Ho:2, j:j + 2 * Wo:2]
    return cols.reshape(B * Ho * Wo, 9 * C)


def col2im_s2(dcols, B, H, W, C):
    """Adjoint of ``im2col_s2``: scatter-add patch gradients back to (B, H, W, C)."""
    Ho, Wo = (H - 1) // 2 + 1, (W - 1) // 2 + 1
    d = dcols.reshape(B, Ho, Wo, 9, C)
    dxp = np.zeros((B, H + 2, W + 2, C), dtype=dcols.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + 2 * Ho:2, j:j + 2 * Wo:2] += d[:, :, :, 3 * i + j]
    return np.ascontiguousarray(dxp[:, 1:H + 1, 1:W + 1])
