"""Hot numeric kernels with two interchangeable implementations.

Every kernel in this module exists twice: an explicit-loop version compiled
with numba's @njit, and a vectorized pure-numpy version. The active set is
chosen once at import time: numba is the default, and setting the environment
variable ``M3V_NO_NUMBA=1`` (or numba being unimportable) selects the numpy
path. Both variants stay importable (``*_np`` / ``*_nb``) so the test suite
and ``benchmarks/bench_kernels.py`` can compare them directly.

All kernels take and return float64 arrays and use edge replication at
borders. Nothing here allocates global state; everything is safe to call
from multiple threads (the numba versions are compiled with nogil).
"""

import math
import os

import numpy as np

_FLAG = os.environ.get("M3V_NO_NUMBA", "").strip().lower()
USE_NUMBA = _FLAG not in ("1", "true", "yes")

if USE_NUMBA:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover - numba is a declared dependency
        USE_NUMBA = False

HIST_BINS = 9
_BIN_WIDTH_DEG = 180.0 / HIST_BINS


# ---------------------------------------------------------------------------
# pure numpy implementations
# ---------------------------------------------------------------------------

def correlate1d_np(img, kernel, axis):
    """Edge-replicated 1D correlation of a 2D image along the given axis."""
    n = (len(kernel) - 1) // 2
    if axis == 0:
        padded = np.pad(img, ((n, n), (0, 0)), mode="edge")
    else:
        padded = np.pad(img, ((0, 0), (n, n)), mode="edge")
    out = np.zeros_like(img)
    for k in range(len(kernel)):
        if axis == 0:
            out += kernel[k] * padded[k:k + img.shape[0], :]
        else:
            out += kernel[k] * padded[:, k:k + img.shape[1]]
    return out


def poly_expand_np(img, g, xg, xxg, ginv15):
    """Quadratic polynomial expansion coefficients for every pixel.

    Returns an (H, W, 5) array with planes [bx, by, axx, ayy, axy] of the
    local model f ~ c + bx*x + by*y + axx*x^2 + ayy*y^2 + axy*x*y, fit by
    Gaussian-weighted least squares with separable correlations.
    """
    sy0 = correlate1d_np(img, g, 0)
    sy1 = correlate1d_np(img, xg, 0)
    sy2 = correlate1d_np(img, xxg, 0)
    b = np.stack(
        [
            correlate1d_np(sy0, g, 1),     # 1
            correlate1d_np(sy0, xg, 1),    # x
            correlate1d_np(sy1, g, 1),     # y
            correlate1d_np(sy0, xxg, 1),   # x^2
            correlate1d_np(sy2, g, 1),     # y^2
            correlate1d_np(sy1, xg, 1),    # x*y
        ],
        axis=-1,
    )
    return np.einsum("ij,hwj->hwi", ginv15, b)


def flow_iteration_np(r1, r2, flow, win_radius):
    """One displacement update given polynomial expansions of both frames."""
    h, w = flow.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    sx = np.clip(xs + flow[:, :, 0], 0.0, w - 1.0)
    sy = np.clip(ys + flow[:, :, 1], 0.0, h - 1.0)

    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = sx - x0
    fy = sy - y0
    w00 = (1 - fx) * (1 - fy)
    w10 = fx * (1 - fy)
    w01 = (1 - fx) * fy
    w11 = fx * fy
    r2s = (
        r2[y0, x0] * w00[..., None]
        + r2[y0, x1] * w10[..., None]
        + r2[y1, x0] * w01[..., None]
        + r2[y1, x1] * w11[..., None]
    )

    a11 = 0.5 * (r1[:, :, 2] + r2s[:, :, 2])
    a22 = 0.5 * (r1[:, :, 3] + r2s[:, :, 3])
    a12 = 0.25 * (r1[:, :, 4] + r2s[:, :, 4])
    dbx = -0.5 * (r2s[:, :, 0] - r1[:, :, 0]) + a11 * flow[:, :, 0] + a12 * flow[:, :, 1]
    dby = -0.5 * (r2s[:, :, 1] - r1[:, :, 1]) + a12 * flow[:, :, 0] + a22 * flow[:, :, 1]

    m = np.stack(
        [
            a11 * a11 + a12 * a12,
            a12 * (a11 + a22),
            a12 * a12 + a22 * a22,
            a11 * dbx + a12 * dby,
            a12 * dbx + a22 * dby,
        ],
        axis=-1,
    )
    m = box_filter_np(m, win_radius)

    g11, g12, g22, h1, h2 = (m[:, :, i] for i in range(5))
    det = g11 * g22 - g12 * g12
    safe = np.abs(det) > 1e-9
    inv = np.where(safe, det, 1.0)
    out = np.empty_like(flow)
    out[:, :, 0] = np.where(safe, (g22 * h1 - g12 * h2) / inv, 0.0)
    out[:, :, 1] = np.where(safe, (g11 * h2 - g12 * h1) / inv, 0.0)
    return out


def box_filter_np(a, radius):
    """Normalized (2r+1)^2 box filter with edge replication, per channel."""
    size = 2 * radius + 1
    padded = np.pad(a, ((radius, radius), (0, 0), (0, 0)), mode="edge")
    c = np.cumsum(padded, axis=0, dtype=np.float64)
    c = np.concatenate([np.zeros_like(c[:1]), c], axis=0)
    a = c[size:] - c[:-size]
    padded = np.pad(a, ((0, 0), (radius, radius), (0, 0)), mode="edge")
    c = np.cumsum(padded, axis=1, dtype=np.float64)
    c = np.concatenate([np.zeros_like(c[:, :1]), c], axis=1)
    a = c[:, size:] - c[:, :-size]
    return a / float(size * size)


def median3x3_np(a):
    """3x3 median of a 2D field, borders edge-replicated."""
    padded = np.pad(a, 1, mode="edge")
    h, w = a.shape
    stack = np.empty((9, h, w), dtype=a.dtype)
    k = 0
    for dy in range(3):
        for dx in range(3):
            stack[k] = padded[dy:dy + h, dx:dx + w]
            k += 1
    return np.median(stack, axis=0)


def bilinear_sample_np(img, xs, ys):
    """Sample a 2D image at fractional positions, clamped to the border."""
    h, w = img.shape
    sx = np.clip(xs, 0.0, w - 1.0)
    sy = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = sx - x0
    fy = sy - y0
    return (
        img[y0, x0] * (1 - fx) * (1 - fy)
        + img[y0, x1] * fx * (1 - fy)
        + img[y1, x0] * (1 - fx) * fy
        + img[y1, x1] * fx * fy
    )


def warp_homography_np(img, hmat):
    """Resample img at H-mapped coordinates: out(x) = img(H @ x)."""
    h, w = img.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    denom = hmat[2, 0] * xs + hmat[2, 1] * ys + hmat[2, 2]
    denom = np.where(np.abs(denom) < 1e-12, 1e-12, denom)
    mx = (hmat[0, 0] * xs + hmat[0, 1] * ys + hmat[0, 2]) / denom
    my = (hmat[1, 0] * xs + hmat[1, 1] * ys + hmat[1, 2]) / denom
    return bilinear_sample_np(img, mx, my)


def orient_hists_np(gx, gy, xs, ys, radius):
    """9-bin unsigned orientation histograms around many points.

    Each pixel in the (2r+1)^2 window votes its magnitude into the two bins
    whose centers (0, 20, ..., 160 degrees) straddle its orientation,
    split by linear interpolation. Windows are edge-replicated. Returns raw
    (unnormalized) bins, shape (N, 9).
    """
    h, w = gx.shape
    out = np.zeros((len(xs), HIST_BINS), dtype=np.float64)
    for i in range(len(xs)):
        cx = int(round(float(xs[i])))
        cy = int(round(float(ys[i])))
        yy = np.clip(np.arange(cy - radius, cy + radius + 1), 0, h - 1)
        xx = np.clip(np.arange(cx - radius, cx + radius + 1), 0, w - 1)
        wgx = gx[np.ix_(yy, xx)].ravel()
        wgy = gy[np.ix_(yy, xx)].ravel()
        mag = np.hypot(wgx, wgy)
        ang = np.degrees(np.arctan2(wgy, wgx)) % 180.0
        pos = ang / _BIN_WIDTH_DEG
        lo = np.floor(pos).astype(np.int64) % HIST_BINS
        frac = pos - np.floor(pos)
        hi = (lo + 1) % HIST_BINS
        out[i] = np.bincount(lo, mag * (1.0 - frac), HIST_BINS)
        out[i] += np.bincount(hi, mag * frac, HIST_BINS)
    return out


def zncc_match_np(prev, nxt, pts, block_radius, search_radius):
    """Best integer-offset ZNCC match in nxt for each corner of prev.

    pts is (N, 2) int [x, y]; corners must be at least block_radius away
    from the border of prev. Returns (matches (N, 2) float64, scores (N,)).
    Offsets whose block would cross the border of nxt are not considered.
    """
    h, w = prev.shape
    br = block_radius
    n = len(pts)
    matches = np.zeros((n, 2), dtype=np.float64)
    scores = np.full(n, -2.0, dtype=np.float64)
    for i in range(n):
        px, py = int(pts[i, 0]), int(pts[i, 1])
        a = prev[py - br:py + br + 1, px - br:px + br + 1].astype(np.float64)
        a = a - a.mean()
        na = math.sqrt((a * a).sum())
        best = -2.0
        bx, by = px, py
        y_lo = max(py - search_radius, br)
        y_hi = min(py + search_radius, h - 1 - br)
        x_lo = max(px - search_radius, br)
        x_hi = min(px + search_radius, w - 1 - br)
        for qy in range(y_lo, y_hi + 1):
            for qx in range(x_lo, x_hi + 1):
                b = nxt[qy - br:qy + br + 1, qx - br:qx + br + 1].astype(np.float64)
                b = b - b.mean()
                nb = math.sqrt((b * b).sum())
                score = (a * b).sum() / (na * nb + 1e-12)
                if score > best:
                    best = score
                    bx, by = qx, qy
        matches[i, 0] = bx
        matches[i, 1] = by
        scores[i] = best
    return matches, scores


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if USE_NUMBA:

    @njit(cache=True, nogil=True)
    def correlate1d_nb(img, kernel, axis):
        h, w = img.shape
        n = (kernel.shape[0] - 1) // 2
        out = np.empty((h, w), dtype=np.float64)
        if axis == 0:
            for x in range(w):
                for y in range(h):
                    s = 0.0
                    for k in range(-n, n + 1):
                        yy = min(max(y + k, 0), h - 1)
                        s += kernel[k + n] * img[yy, x]
                    out[y, x] = s
        else:
            for y in range(h):
                for x in range(w):
                    s = 0.0
                    for k in range(-n, n + 1):
                        xx = min(max(x + k, 0), w - 1)
                        s += kernel[k + n] * img[y, xx]
                    out[y, x] = s
        return out

    @njit(cache=True, nogil=True)
    def poly_expand_nb(img, g, xg, xxg, ginv15):
        h, w = img.shape
        n = (g.shape[0] - 1) // 2
        tmp = np.empty((3, h, w), dtype=np.float64)
        for x in range(w):
            for y in range(h):
                s0 = 0.0
                s1 = 0.0
                s2 = 0.0
                for k in range(-n, n + 1):
                    yy = min(max(y + k, 0), h - 1)
                    v = img[yy, x]
                    s0 += g[k + n] * v
                    s1 += xg[k + n] * v
                    s2 += xxg[k + n] * v
                tmp[0, y, x] = s0
                tmp[1, y, x] = s1
                tmp[2, y, x] = s2
        out = np.empty((h, w, 5), dtype=np.float64)
        b = np.empty(6, dtype=np.float64)
        for y in range(h):
            for x in range(w):
                b1 = 0.0
                bx = 0.0
                by = 0.0
                bxx = 0.0
                byy = 0.0
                bxy = 0.0
                for k in range(-n, n + 1):
                    xx = min(max(x + k, 0), w - 1)
                    t0 = tmp[0, y, xx]
                    t1 = tmp[1, y, xx]
                    t2 = tmp[2, y, xx]
                    b1 += g[k + n] * t0
                    bx += xg[k + n] * t0
                    bxx += xxg[k + n] * t0
                    by += g[k + n] * t1
                    bxy += xg[k + n] * t1
                    byy += g[k + n] * t2
                b[0] = b1
                b[1] = bx
                b[2] = by
                b[3] = bxx
                b[4] = byy
                b[5] = bxy
                for r in range(5):
                    s = 0.0
                    for c in range(6):
                        s += ginv15[r, c] * b[c]
                    out[y, x, r] = s
        return out

    @njit(cache=True, nogil=True)
    def box_filter_nb(a, radius):
        h, w, c = a.shape
        size = 2 * radius + 1
        norm = 1.0 / (size * size)
        tmp = np.empty((h, w, c), dtype=np.float64)
        for x in range(w):
            for ch in range(c):
                s = 0.0
                for k in range(-radius, radius + 1):
                    s += a[min(max(k, 0), h - 1), x, ch]
                tmp[0, x, ch] = s
                for y in range(1, h):
                    s += a[min(y + radius, h - 1), x, ch]
                    s -= a[max(y - radius - 1, 0), x, ch]
                    tmp[y, x, ch] = s
        out = np.empty((h, w, c), dtype=np.float64)
        for y in range(h):
            for ch in range(c):
                s = 0.0
                for k in range(-radius, radius + 1):
                    s += tmp[y, min(max(k, 0), w - 1), ch]
                out[y, 0, ch] = s * norm
                for x in range(1, w):
                    s += tmp[y, min(x + radius, w - 1), ch]
                    s -= tmp[y, max(x - radius - 1, 0), ch]
                    out[y, x, ch] = s * norm
        return out

    @njit(cache=True, nogil=True)
    def flow_iteration_nb(r1, r2, flow, win_radius):
        h, w = flow.shape[:2]
        m = np.empty((h, w, 5), dtype=np.float64)
        for y in range(h):
            for x in range(w):
                dx = flow[y, x, 0]
                dy = flow[y, x, 1]
                sx = min(max(x + dx, 0.0), w - 1.0)
                sy = min(max(y + dy, 0.0), h - 1.0)
                x0 = int(math.floor(sx))
                y0 = int(math.floor(sy))
                x1 = min(x0 + 1, w - 1)
                y1 = min(y0 + 1, h - 1)
                fx = sx - x0
                fy = sy - y0
                w00 = (1.0 - fx) * (1.0 - fy)
                w10 = fx * (1.0 - fy)
                w01 = (1.0 - fx) * fy
                w11 = fx * fy
                r20 = (r2[y0, x0, 0] * w00 + r2[y0, x1, 0] * w10
                       + r2[y1, x0, 0] * w01 + r2[y1, x1, 0] * w11)
                r21 = (r2[y0, x0, 1] * w00 + r2[y0, x1, 1] * w10
                       + r2[y1, x0, 1] * w01 + r2[y1, x1, 1] * w11)
                r22 = (r2[y0, x0, 2] * w00 + r2[y0, x1, 2] * w10
                       + r2[y1, x0, 2] * w01 + r2[y1, x1, 2] * w11)
                r23 = (r2[y0, x0, 3] * w00 + r2[y0, x1, 3] * w10
                       + r2[y1, x0, 3] * w01 + r2[y1, x1, 3] * w11)
                r24 = (r2[y0, x0, 4] * w00 + r2[y0, x1, 4] * w10
                       + r2[y1, x0, 4] * w01 + r2[y1, x1, 4] * w11)
                a11 = 0.5 * (r1[y, x, 2] + r22)
                a22 = 0.5 * (r1[y, x, 3] + r23)
                a12 = 0.25 * (r1[y, x, 4] + r24)
                dbx = -0.5 * (r20 - r1[y, x, 0]) + a11 * dx + a12 * dy
                dby = -0.5 * (r21 - r1[y, x, 1]) + a12 * dx + a22 * dy
                m[y, x, 0] = a11 * a11 + a12 * a12
                m[y, x, 1] = a12 * (a11 + a22)
                m[y, x, 2] = a12 * a12 + a22 * a22
                m[y, x, 3] = a11 * dbx + a12 * dby
                m[y, x, 4] = a12 * dbx + a22 * dby
        m = box_filter_nb(m, win_radius)
        out = np.empty((h, w, 2), dtype=np.float64)
        for y in range(h):
            for x in range(w):
                g11 = m[y, x, 0]
                g12 = m[y, x, 1]
                g22 = m[y, x, 2]
                h1 = m[y, x, 3]
                h2 = m[y, x, 4]
                det = g11 * g22 - g12 * g12
                if abs(det) > 1e-9:
                    out[y, x, 0] = (g22 * h1 - g12 * h2) / det
                    out[y, x, 1] = (g11 * h2 - g12 * h1) / det
                else:
                    out[y, x, 0] = 0.0
                    out[y, x, 1] = 0.0
        return out

    @njit(cache=True, nogil=True)
    def median3x3_nb(a):
        h, w = a.shape
        out = np.empty((h, w), dtype=np.float64)
        win = np.empty(9, dtype=np.float64)
        for y in range(h):
            for x in range(w):
                k = 0
                for dy in range(-1, 2):
                    for dx in range(-1, 2):
                        yy = min(max(y + dy, 0), h - 1)
                        xx = min(max(x + dx, 0), w - 1)
                        win[k] = a[yy, xx]
                        k += 1
                # insertion sort of 9 values
                for i in range(1, 9):
                    v = win[i]
                    j = i - 1
                    while j >= 0 and win[j] > v:
                        win[j + 1] = win[j]
                        j -= 1
                    win[j + 1] = v
                out[y, x] = win[4]
        return out

    @njit(cache=True, nogil=True)
    def bilinear_sample_nb(img, xs, ys):
        h, w = img.shape
        n = xs.shape[0]
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            sx = min(max(xs[i], 0.0), w - 1.0)
            sy = min(max(ys[i], 0.0), h - 1.0)
            x0 = int(math.floor(sx))
            y0 = int(math.floor(sy))
            x1 = min(x0 + 1, w - 1)
            y1 = min(y0 + 1, h - 1)
            fx = sx - x0
            fy = sy - y0
            out[i] = (img[y0, x0] * (1 - fx) * (1 - fy)
                      + img[y0, x1] * fx * (1 - fy)
                      + img[y1, x0] * (1 - fx) * fy
                      + img[y1, x1] * fx * fy)
        return out

    @njit(cache=True, nogil=True)
    def warp_homography_nb(img, hmat):
        h, w = img.shape
        out = np.empty((h, w), dtype=np.float64)
        for y in range(h):
            for x in range(w):
                denom = hmat[2, 0] * x + hmat[2, 1] * y + hmat[2, 2]
                if abs(denom) < 1e-12:
                    denom = 1e-12
                mx = (hmat[0, 0] * x + hmat[0, 1] * y + hmat[0, 2]) / denom
                my = (hmat[1, 0] * x + hmat[1, 1] * y + hmat[1, 2]) / denom
                sx = min(max(mx, 0.0), w - 1.0)
                sy = min(max(my, 0.0), h - 1.0)
                x0 = int(math.floor(sx))
                y0 = int(math.floor(sy))
                x1 = min(x0 + 1, w - 1)
                y1 = min(y0 + 1, h - 1)
                fx = sx - x0
                fy = sy - y0
                out[y, x] = (img[y0, x0] * (1 - fx) * (1 - fy)
                             + img[y0, x1] * fx * (1 - fy)
                             + img[y1, x0] * (1 - fx) * fy
                             + img[y1, x1] * fx * fy)
        return out

    @njit(cache=True, nogil=True)
    def orient_hists_nb(gx, gy, xs, ys, radius):
        h, w = gx.shape
        n = xs.shape[0]
        out = np.zeros((n, HIST_BINS), dtype=np.float64)
        for i in range(n):
            cx = int(round(xs[i]))
            cy = int(round(ys[i]))
            for dy in range(-radius, radius + 1):
                yy = min(max(cy + dy, 0), h - 1)
                for dx in range(-radius, radius + 1):
                    xx = min(max(cx + dx, 0), w - 1)
                    vx = gx[yy, xx]
                    vy = gy[yy, xx]
                    mag = math.hypot(vx, vy)
                    if mag == 0.0:
                        continue
                    ang = math.degrees(math.atan2(vy, vx)) % 180.0
                    pos = ang / _BIN_WIDTH_DEG
                    lo = int(math.floor(pos))
                    frac = pos - lo
                    lo = lo % HIST_BINS
                    hi = (lo + 1) % HIST_BINS
                    out[i, lo] += mag * (1.0 - frac)
                    out[i, hi] += mag * frac
        return out

    @njit(cache=True, nogil=True)
    def zncc_match_nb(prev, nxt, pts, block_radius, search_radius):
        h, w = prev.shape
        br = block_radius
        n = pts.shape[0]
        side = 2 * br + 1
        matches = np.zeros((n, 2), dtype=np.float64)
        scores = np.full(n, -2.0, dtype=np.float64)
        a = np.empty((side, side), dtype=np.float64)
        for i in range(n):
            px = int(pts[i, 0])
            py = int(pts[i, 1])
            am = 0.0
            for dy in range(side):
                for dx in range(side):
                    v = prev[py - br + dy, px - br + dx]
                    a[dy, dx] = v
                    am += v
            am /= side * side
            na = 0.0
            for dy in range(side):
                for dx in range(side):
                    a[dy, dx] -= am
                    na += a[dy, dx] * a[dy, dx]
            na = math.sqrt(na)
            best = -2.0
            bx = px
            by = py
            y_lo = max(py - search_radius, br)
            y_hi = min(py + search_radius, h - 1 - br)
            x_lo = max(px - search_radius, br)
            x_hi = min(px + search_radius, w - 1 - br)
            for qy in range(y_lo, y_hi + 1):
                for qx in range(x_lo, x_hi + 1):
                    bm = 0.0
                    for dy in range(side):
                        for dx in range(side):
                            bm += nxt[qy - br + dy, qx - br + dx]
                    bm /= side * side
                    num = 0.0
                    nb = 0.0
                    for dy in range(side):
                        for dx in range(side):
                            bv = nxt[qy - br + dy, qx - br + dx] - bm
                            num += a[dy, dx] * bv
                            nb += bv * bv
                    score = num / (na * math.sqrt(nb) + 1e-12)
                    if score > best:
                        best = score
                        bx = qx
                        by = qy
            matches[i, 0] = bx
            matches[i, 1] = by
            scores[i] = best
        return matches, scores


# ---------------------------------------------------------------------------
# active bindings
# ---------------------------------------------------------------------------

if USE_NUMBA:
    correlate1d = correlate1d_nb
    poly_expand = poly_expand_nb
    box_filter = box_filter_nb
    flow_iteration = flow_iteration_nb
    median3x3 = median3x3_nb
    bilinear_sample = bilinear_sample_nb
    warp_homography = warp_homography_nb
    orient_hists = orient_hists_nb
    zncc_match = zncc_match_nb
else:
    correlate1d = correlate1d_np
    poly_expand = poly_expand_np
    box_filter = box_filter_np
    flow_iteration = flow_iteration_np
    median3x3 = median3x3_np
    bilinear_sample = bilinear_sample_np
    warp_homography = warp_homography_np
    orient_hists = orient_hists_np
    zncc_match = zncc_match_np


def active_backend():
    return "numba" if USE_NUMBA else "numpy"
