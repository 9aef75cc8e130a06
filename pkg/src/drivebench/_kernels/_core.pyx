# cython: language_level=3
"""Compiled geometry and convolution kernels. Semantics mirror ``_fallback.py`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin, sqrt, floor, fabs, INFINITY

cnp.import_array()

cdef double _EPS = 1e-12


cdef inline void _slab(double o, double d, double lo, double hi,
                       double* tmin, double* tmax) noexcept nogil:
    cdef double t1, t2
    if fabs(d) < _EPS:
        if o >= lo and o <= hi:
            tmin[0] = -INFINITY
            tmax[0] = INFINITY
        else:
            tmin[0] = INFINITY
            tmax[0] = -INFINITY
    else:
        t1 = (lo - o) / d
        t2 = (hi - o) / d
        if t1 < t2:
            tmin[0] = t1
            tmax[0] = t2
        else:
            tmin[0] = t2
            tmax[0] = t1


def ray_boxes(double ox, double oy, dirs, boxes, double max_range):
    cdef double[:, ::1] D = np.ascontiguousarray(dirs, dtype=np.float64)
    cdef double[:, ::1] B = np.ascontiguousarray(np.asarray(boxes, dtype=np.float64).reshape(-1, 5))
    cdef Py_ssize_t n = D.shape[0], m = B.shape[0], i, j
    dist_a = np.full(n, max_range)
    idx_a = np.full(n, -1, dtype=np.int64)
    cdef double[::1] dist = dist_a
    cdef long long[::1] idx = idx_a
    if m == 0 or n == 0:
        return dist_a, idx_a
    cdef double[::1] lox = np.empty(m)
    cdef double[::1] loy = np.empty(m)
    cdef double[::1] cc = np.empty(m)
    cdef double[::1] ss = np.empty(m)
    cdef double rx, ry, ldx, ldy, txmin, txmax, tymin, tymax, tenter, texit, t, best
    cdef long long bi
    for j in range(m):
        cc[j] = cos(B[j, 4])
        ss[j] = sin(B[j, 4])
        rx = ox - B[j, 0]
        ry = oy - B[j, 1]
        lox[j] = cc[j] * rx + ss[j] * ry
        loy[j] = -ss[j] * rx + cc[j] * ry
    with nogil:
        for i in range(n):
            best = INFINITY
            bi = -1
            for j in range(m):
                ldx = D[i, 0] * cc[j] + D[i, 1] * ss[j]
                ldy = -D[i, 0] * ss[j] + D[i, 1] * cc[j]
                _slab(lox[j], ldx, -B[j, 2], B[j, 2], &txmin, &txmax)
                _slab(loy[j], ldy, -B[j, 3], B[j, 3], &tymin, &tymax)
                tenter = txmin if txmin > tymin else tymin
                texit = txmax if txmax < tymax else tymax
                if tenter <= texit and texit >= 0.0:
                    t = tenter if tenter > 0.0 else 0.0
                    if t < best:
                        best = t
                        bi = j
            if best < max_range:
                dist[i] = best
                idx[i] = bi
    return dist_a, idx_a


def ray_region_boundary(double ox, double oy, dirs, rects, double max_range):
    cdef double[:, ::1] D = np.ascontiguousarray(dirs, dtype=np.float64)
    cdef double[:, ::1] R = np.ascontiguousarray(np.asarray(rects, dtype=np.float64).reshape(-1, 4))
    cdef Py_ssize_t n = D.shape[0], r = R.shape[0], i, j, it
    out_a = np.full(n, max_range)
    cdef double[::1] out = out_a
    if r == 0 or n == 0:
        return out_a
    cdef bint inside = False
    for j in range(r):
        if ox >= R[j, 0] and ox <= R[j, 2] and oy >= R[j, 1] and oy <= R[j, 3]:
            inside = True
            break
    cdef double[::1] t0 = np.empty(r)
    cdef double[::1] t1 = np.empty(r)
    cdef double txmin, txmax, tymin, tymax, cur, nxt, res
    with nogil:
        for i in range(n):
            for j in range(r):
                _slab(ox, D[i, 0], R[j, 0], R[j, 2], &txmin, &txmax)
                _slab(oy, D[i, 1], R[j, 1], R[j, 3], &tymin, &tymax)
                t0[j] = txmin if txmin > tymin else tymin
                t1[j] = txmax if txmax < tymax else tymax
            if inside:
                cur = 0.0
                for it in range(r + 1):
                    nxt = cur
                    for j in range(r):
                        if t0[j] <= t1[j] and t0[j] <= cur + 1e-9 and t1[j] > cur and t1[j] > nxt:
                            nxt = t1[j]
                    if nxt == cur:
                        break
                    cur = nxt
                res = cur
            else:
                res = INFINITY
                for j in range(r):
                    if t0[j] <= t1[j] and t0[j] > 0.0 and t0[j] < res:
                        res = t0[j]
            if res < max_range:
                out[i] = res
    return out_a


def bev_histogram(points, double x_range, double y_half, int cells, double z_split):
    grid_a = np.zeros((cells, cells, 2), dtype=np.int64)
    cdef double[:, ::1] P = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    cdef long long[:, :, ::1] G = grid_a
    cdef Py_ssize_t n = P.shape[0], i
    cdef double res_x = x_range / cells
    cdef double res_y = 2.0 * y_half / cells
    cdef double x, y
    cdef long long row, col
    with nogil:
        for i in range(n):
            x = P[i, 0]
            y = P[i, 1]
            if x >= 0.0 and x < x_range and y >= -y_half and y < y_half:
                row = <long long>floor(x / res_x)
                col = <long long>floor((y + y_half) / res_y)
                if row > cells - 1:
                    row = cells - 1
                if col > cells - 1:
                    col = cells - 1
                if P[i, 2] > z_split:
                    G[row, col, 1] += 1
                else:
                    G[row, col, 0] += 1
    return grid_a


def project_polyline(double px, double py, pts, cum, lo, hi):
    cdef double[:, ::1] A = np.ascontiguousarray(pts, dtype=np.float64)
    cdef double[::1] C = np.ascontiguousarray(cum, dtype=np.float64)
    cdef Py_ssize_t l = max(int(lo), 0)
    cdef Py_ssize_t h = min(int(hi), A.shape[0] - 1)
    cdef Py_ssize_t i, k
    cdef double abx, aby, L2, t, qx, qy, d2, best, bt, bL2
    if h <= l:
        return float(C[l]), float(sqrt((px - A[l, 0]) ** 2 + (py - A[l, 1]) ** 2)), int(l)
    best = INFINITY
    k = l
    bt = 0.0
    bL2 = 0.0
    for i in range(l, h):
        abx = A[i + 1, 0] - A[i, 0]
        aby = A[i + 1, 1] - A[i, 1]
        L2 = abx * abx + aby * aby
        if L2 > 0.0:
            t = ((px - A[i, 0]) * abx + (py - A[i, 1]) * aby) / L2
        else:
            t = 0.0
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
        qx = A[i, 0] + t * abx
        qy = A[i, 1] + t * aby
        d2 = (px - qx) ** 2 + (py - qy) ** 2
        if d2 < best:
            best = d2
            k = i
            bt = t
            bL2 = L2
    return float(C[k] + bt * sqrt(bL2)), float(sqrt(best)), int(k)


cdef inline void _corners(double[:] b, double* cx, double* cy) noexcept nogil:
    cdef double c = cos(b[4]), s = sin(b[4])
    cdef double axx = c * b[2], axy = s * b[2]
    cdef double ayx = -s * b[3], ayy = c * b[3]
    cx[0] = b[0] + axx + ayx; cy[0] = b[1] + axy + ayy
    cx[1] = b[0] - axx + ayx; cy[1] = b[1] - axy + ayy
    cx[2] = b[0] - axx - ayx; cy[2] = b[1] - axy - ayy
    cx[3] = b[0] + axx - ayx; cy[3] = b[1] + axy - ayy


def obb_overlap(box, boxes):
    cdef double[::1] a = np.ascontiguousarray(box, dtype=np.float64)
    cdef double[:, ::1] B = np.ascontiguousarray(np.asarray(boxes, dtype=np.float64).reshape(-1, 5))
    cdef Py_ssize_t m = B.shape[0], j, q, k
    out_a = np.zeros(m, dtype=bool)
    cdef cnp.uint8_t[::1] out = out_a.view(np.uint8)
    cdef double acx[4]
    cdef double acy[4]
    cdef double bcx[4]
    cdef double bcy[4]
    cdef double axes[4][2]
    cdef double pa_min, pa_max, pb_min, pb_max, p
    cdef bint sep
    _corners(a, acx, acy)
    for j in range(m):
        _corners(B[j], bcx, bcy)
        axes[0][0] = cos(a[4]); axes[0][1] = sin(a[4])
        axes[1][0] = -sin(a[4]); axes[1][1] = cos(a[4])
        axes[2][0] = cos(B[j, 4]); axes[2][1] = sin(B[j, 4])
        axes[3][0] = -sin(B[j, 4]); axes[3][1] = cos(B[j, 4])
        sep = False
        for q in range(4):
            pa_min = INFINITY; pa_max = -INFINITY
            pb_min = INFINITY; pb_max = -INFINITY
            for k in range(4):
                p = acx[k] * axes[q][0] + acy[k] * axes[q][1]
                if p < pa_min: pa_min = p
                if p > pa_max: pa_max = p
                p = bcx[k] * axes[q][0] + bcy[k] * axes[q][1]
                if p < pb_min: pb_min = p
                if p > pb_max: pb_max = p
            if pa_max < pb_min or pb_max < pa_min:
                sep = True
                break
        out[j] = 0 if sep else 1
    return out_a


ctypedef fused real:
    float
    double


cdef void _im2col(real[:, :, :, ::1] x, real[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3]
    cdef Py_ssize_t Ho = (H - 1) // 2 + 1, Wo = (W - 1) // 2 + 1
    cdef Py_ssize_t b, oh, ow, i, j, c, r, q, row, col
    for b in range(B):
        for oh in range(Ho):
            for ow in range(Wo):
                row = (b * Ho + oh) * Wo + ow
                for i in range(3):
                    r = 2 * oh + i - 1
                    for j in range(3):
                        q = 2 * ow + j - 1
                        col = (3 * i + j) * C
                        if r < 0 or r >= H or q < 0 or q >= W:
                            for c in range(C):
                                out[row, col + c] = 0
                        else:
                            for c in range(C):
                                out[row, col + c] = x[b, r, q, c]


cdef void _col2im(real[:, ::1] d, real[:, :, :, ::1] out) noexcept nogil:
    # (i, j) outermost so every pixel sums its contributions in the fallback's order
    cdef Py_ssize_t B = out.shape[0], H = out.shape[1], W = out.shape[2], C = out.shape[3]
    cdef Py_ssize_t Ho = (H - 1) // 2 + 1, Wo = (W - 1) // 2 + 1
    cdef Py_ssize_t b, oh, ow, i, j, c, r, q, row, col
    for i in range(3):
        for j in range(3):
            col = (3 * i + j) * C
            for b in range(B):
                for oh in range(Ho):
                    r = 2 * oh + i - 1
                    if r < 0 or r >= H:
                        continue
                    for ow in range(Wo):
                        q = 2 * ow + j - 1
                        if q < 0 or q >= W:
                            continue
                        row = (b * Ho + oh) * Wo + ow
                        for c in range(C):
                            out[b, r, q, c] += d[row, col + c]


def im2col_s2(x):
    x = np.ascontiguousarray(x)
    B, H, W, C = x.shape
    Ho, Wo = (H - 1) // 2 + 1, (W - 1) // 2 + 1
    out = np.empty((B * Ho * Wo, 9 * C), dtype=x.dtype)
    if x.dtype == np.float32:
        _im2col[float](x, out)
    elif x.dtype == np.float64:
        _im2col[double](x, out)
    else:
        raise TypeError(f"unsupported dtype {x.dtype}")
    return out


def col2im_s2(dcols, Py_ssize_t B, Py_ssize_t H, Py_ssize_t W, Py_ssize_t C):
    d = np.ascontiguousarray(dcols)
    out = np.zeros((B, H, W, C), dtype=d.dtype)
    if d.dtype == np.float32:
        _col2im[float](d, out)
    elif d.dtype == np.float64:
        _col2im[double](d, out)
    else:
        raise TypeError(f"unsupported dtype {d.dtype}")
    return out
