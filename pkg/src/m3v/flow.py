"""Dense optical flow: coarse-to-fine polynomial-expansion estimation,
median conditioning, and homography-based camera-motion removal.
"""

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import kernels

FLO2_MAGIC = b"M3FL"
FLO2_VERSION = 1


@dataclass(frozen=True)
class FlowParams:
    pyramid_levels: int = 4
    pyramid_scale: float = 0.5
    window_radius: int = 7
    iterations_per_level: int = 3
    polynomial_sigma: float = 1.5
    flow_bound: float = 20.0

    def __post_init__(self):
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")
        if not 0.0 < self.pyramid_scale < 1.0:
            raise ValueError("pyramid_scale must be in (0, 1)")
        if self.window_radius < 1:
            raise ValueError("window_radius must be >= 1")
        if self.iterations_per_level < 1:
            raise ValueError("iterations_per_level must be >= 1")
        if self.flow_bound <= 0:
            raise ValueError("flow_bound must be positive")


@dataclass
class FlowField:
    """Per-pixel displacement (pixels/frame) from one frame to the next."""

    u: np.ndarray
    v: np.ndarray
    width: int
    height: int
    compensated: bool = None  # set by compensate_camera_motion

    @classmethod
    def from_uv(cls, uv, compensated=None):
        h, w = uv.shape[:2]
        return cls(u=np.ascontiguousarray(uv[:, :, 0]),
                   v=np.ascontiguousarray(uv[:, :, 1]),
                   width=w, height=h, compensated=compensated)

    def uv(self):
        return np.stack([self.u, self.v], axis=-1)


class Homography:
    """3x3 projective transform, normalized so that h33 = 1."""

    def __init__(self, matrix):
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError("homography must be 3x3")
        if abs(np.linalg.det(m)) <= 1e-9:
            raise ValueError("homography is singular")
        if abs(m[2, 2]) < 1e-12:
            raise ValueError("cannot normalize homography with h33 ~ 0")
        self.matrix = m / m[2, 2]

    def apply(self, pts):
        ph = np.c_[pts, np.ones(len(pts))]
        q = ph @ self.matrix.T
        return q[:, :2] / q[:, 2:3]


def _plane(frame):
    """Coerce an (H, W) or (H, W, 1) input to a float64 (H, W) plane."""
    a = np.asarray(frame, dtype=np.float64)
    if a.ndim == 3:
        if a.shape[2] != 1:
            raise ValueError("flow needs grayscale input; convert first")
        a = a[:, :, 0]
    if a.ndim != 2:
        raise ValueError(f"expected 2D frame, got shape {a.shape}")
    return np.ascontiguousarray(a)


_FB_CACHE = {}


def _farneback_constants(sigma):
    """1D applicability kernels and the (5, 6) inverse-Gram projection."""
    key = round(float(sigma), 9)
    if key in _FB_CACHE:
        return _FB_CACHE[key]
    n = max(2, int(round(4.5 * sigma)))
    x = np.arange(-n, n + 1, dtype=np.float64)
    g = np.exp(-x * x / (2.0 * sigma * sigma))
    g /= g.sum()
    xg = x * g
    xxg = x * x * g
    xv, yv = np.meshgrid(x, x)
    w2 = np.outer(g, g)
    basis = [np.ones_like(xv), xv, yv, xv * xv, yv * yv, xv * yv]
    gram = np.empty((6, 6), dtype=np.float64)
    for i in range(6):
        for j in range(6):
            gram[i, j] = float((w2 * basis[i] * basis[j]).sum())
    ginv15 = np.ascontiguousarray(np.linalg.inv(gram)[1:6, :])
    out = (g, xg, xxg, ginv15, n)
    _FB_CACHE[key] = out
    return out


def _resize_bilinear(img, out_h, out_w):
    h, w = img.shape[:2]
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    if img.ndim == 3:
        fy = fy[..., None]
        fx = fx[..., None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def _gaussian_smooth(img, sigma):
    radius = max(1, int(round(3 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-x * x / (2 * sigma * sigma))
    g /= g.sum()
    return kernels.correlate1d(kernels.correlate1d(img, g, 0), g, 1)


def compute_dense_flow(prev, nxt, params=FlowParams()):
    """Coarse-to-fine dense flow between two grayscale frames.

    The returned field is clamped componentwise to +/- params.flow_bound.
    """
    a = _plane(prev)
    b = _plane(nxt)
    if a.shape != b.shape:
        raise ValueError(f"frame dimensions differ: {a.shape} vs {b.shape}")
    h, w = a.shape
    min_side = 2 * params.window_radius + 1
    if min(h, w) < min_side:
        raise ValueError(
            f"frame {w}x{h} smaller than the {min_side}px analysis window"
        )

    g, xg, xxg, ginv15, n = _farneback_constants(params.polynomial_sigma)
    min_level_side = max(2 * n + 1, min_side)

    # level image pairs, finest first
    levels = [(a, b)]
    scale = params.pyramid_scale
    anti_alias_sigma = 0.5 * np.sqrt(max(1.0 / (scale * scale) - 1.0, 1e-6))
    for _ in range(1, params.pyramid_levels):
        pa, pb = levels[-1]
        nh = int(round(pa.shape[0] * scale))
        nw = int(round(pa.shape[1] * scale))
        if min(nh, nw) < min_level_side:
            break
        sa = _gaussian_smooth(pa, anti_alias_sigma)
        sb = _gaussian_smooth(pb, anti_alias_sigma)
        levels.append((np.ascontiguousarray(_resize_bilinear(sa, nh, nw)),
                       np.ascontiguousarray(_resize_bilinear(sb, nh, nw))))

    flow = None
    for la, lb in reversed(levels):
        r1 = kernels.poly_expand(la, g, xg, xxg, ginv15)
        r2 = kernels.poly_expand(lb, g, xg, xxg, ginv15)
        lh, lw = la.shape
        if flow is None:
            flow = np.zeros((lh, lw, 2), dtype=np.float64)
        else:
            zoom = lh / flow.shape[0]
            flow = np.ascontiguousarray(_resize_bilinear(flow, lh, lw) * zoom)
        for _ in range(params.iterations_per_level):
            flow = kernels.flow_iteration(r1, r2, flow, params.window_radius)

    np.clip(flow, -params.flow_bound, params.flow_bound, out=flow)
    return FlowField.from_uv(flow)


def median_filter_flow(field):
    """3x3 componentwise median with edge replication (tracking conditioner)."""
    return FlowField(u=kernels.median3x3(np.ascontiguousarray(field.u)),
                     v=kernels.median3x3(np.ascontiguousarray(field.v)),
                     width=field.width, height=field.height,
                     compensated=field.compensated)


# ---------------------------------------------------------------------------
# camera-motion compensation
# ---------------------------------------------------------------------------

HARRIS_K = 0.06
ZNCC_BLOCK_RADIUS = 5       # 11x11 blocks
ZNCC_MIN_SCORE = 0.6
RANSAC_THRESHOLD = 2.0      # px
RANSAC_MAX_ITERS = 500
RANSAC_CONFIDENCE = 0.99
MIN_MATCHES = 8


def harris_corners(plane, max_corners=300, margin=8, smoothing=1.5):
    """Strongest Harris corners at least `margin` px from the border."""
    gx = np.zeros_like(plane)
    gy = np.zeros_like(plane)
    gx[:, 1:-1] = plane[:, 2:] - plane[:, :-2]
    gy[1:-1, :] = plane[2:, :] - plane[:-2, :]
    ixx = _gaussian_smooth(gx * gx, smoothing)
    iyy = _gaussian_smooth(gy * gy, smoothing)
    ixy = _gaussian_smooth(gx * gy, smoothing)
    resp = ixx * iyy - ixy * ixy - HARRIS_K * (ixx + iyy) ** 2
    peak = resp.max()
    if peak <= 0:
        return np.zeros((0, 2), dtype=np.int64)
    padded = np.pad(resp, 1, mode="constant", constant_values=-np.inf)
    local_max = np.ones_like(resp, dtype=bool)
    for dy in range(3):
        for dx in range(3):
            if dy == 1 and dx == 1:
                continue
            local_max &= resp >= padded[dy:dy + resp.shape[0], dx:dx + resp.shape[1]]
    keep = local_max & (resp > 0.01 * peak)
    keep[:margin, :] = keep[-margin:, :] = False
    keep[:, :margin] = keep[:, -margin:] = False
    ys, xs = np.nonzero(keep)
    if len(xs) > max_corners:
        order = np.argsort(resp[ys, xs])[::-1][:max_corners]
        ys, xs = ys[order], xs[order]
    return np.stack([xs, ys], axis=1).astype(np.int64)


def _dlt_homography(src, dst):
    """Direct linear transform with Hartley normalization; None if degenerate."""
    def normalize(pts):
        c = pts.mean(axis=0)
        d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
        if d < 1e-9:
            return None, None
        s = np.sqrt(2.0) / d
        t = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])
        ph = np.c_[pts, np.ones(len(pts))]
        return (ph @ t.T)[:, :2], t

    sn, ts = normalize(src)
    dn, td = normalize(dst)
    if sn is None or dn is None:
        return None
    n = len(src)
    a = np.zeros((2 * n, 9))
    x, y = sn[:, 0], sn[:, 1]
    u, v = dn[:, 0], dn[:, 1]
    a[0::2] = np.c_[x, y, np.ones(n), np.zeros(n), np.zeros(n), np.zeros(n),
                    -u * x, -u * y, -u]
    a[1::2] = np.c_[np.zeros(n), np.zeros(n), np.zeros(n), x, y, np.ones(n),
                    -v * x, -v * y, -v]
    _, sv, vt = np.linalg.svd(a)
    if sv[-2] < 1e-12:
        return None
    hn = vt[-1].reshape(3, 3)
    if abs(hn[2, 2]) < 1e-12:
        return None
    h = np.linalg.inv(td) @ hn @ ts
    if abs(h[2, 2]) < 1e-12 or abs(np.linalg.det(h)) <= 1e-9:
        return None
    return h / h[2, 2]


def ransac_homography(src, dst, threshold=RANSAC_THRESHOLD,
                      max_iters=RANSAC_MAX_ITERS,
                      confidence=RANSAC_CONFIDENCE, seed=0):
    """Fit a homography src->dst by RANSAC; returns (Homography, inlier mask).

    Seeded for reproducibility. Returns (None, None) when every sample is
    degenerate or no model reaches MIN_MATCHES inliers.
    """
    n = len(src)
    if n < 4:
        return None, None
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    rng = np.random.default_rng(seed)
    best_count = 0
    best_mask = None
    needed = max_iters
    it = 0
    while it < min(max_iters, needed):
        it += 1
        idx = rng.choice(n, size=4, replace=False)
        h = _dlt_homography(src[idx], dst[idx])
        if h is None:
            continue
        proj = np.c_[src, np.ones(n)] @ h.T
        wcol = np.where(np.abs(proj[:, 2]) < 1e-12, 1e-12, proj[:, 2])
        err = np.hypot(proj[:, 0] / wcol - dst[:, 0],
                       proj[:, 1] / wcol - dst[:, 1])
        mask = err < threshold
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
            ratio = count / n
            if ratio > 0:
                denom = np.log(max(1.0 - ratio ** 4, 1e-12))
                if denom < 0:
                    needed = int(np.ceil(np.log(1.0 - confidence) / denom))
    if best_mask is None or best_count < MIN_MATCHES:
        return None, None
    h = _dlt_homography(src[best_mask], dst[best_mask])
    if h is None:
        return None, None
    return Homography(h), best_mask


def compensate_camera_motion(prev, nxt, params=FlowParams()):
    """Warp flow: remove estimated global camera motion, then compute flow.

    Harris corners on prev are matched into nxt by ZNCC block search, a
    homography is fit by RANSAC, nxt is rectified by it, and dense flow is
    computed against the rectified frame. Degenerate estimation (too few
    corners, matches, or inliers) falls back to plain flow with
    compensated=False on the result.
    """
    a = _plane(prev)
    b = _plane(nxt)
    if a.shape != b.shape:
        raise ValueError(f"frame dimensions differ: {a.shape} vs {b.shape}")
    if min(a.shape) < 32:
        raise ValueError("camera compensation needs frames of at least 32x32")

    def fallback():
        field = compute_dense_flow(a, b, params)
        field.compensated = False
        return field

    margin = ZNCC_BLOCK_RADIUS + 1
    corners = harris_corners(a, margin=margin)
    if len(corners) < MIN_MATCHES:
        return fallback()
    matches, scores = kernels.zncc_match(a, b, corners, ZNCC_BLOCK_RADIUS,
                                         int(params.flow_bound))
    good = scores >= ZNCC_MIN_SCORE
    if int(good.sum()) < MIN_MATCHES:
        return fallback()
    homography, inliers = ransac_homography(corners[good].astype(np.float64),
                                            matches[good])
    if homography is None or int(inliers.sum()) < MIN_MATCHES:
        return fallback()

    warped = kernels.warp_homography(b, np.ascontiguousarray(homography.matrix))
    field = compute_dense_flow(a, warped, params)
    field.compensated = True
    return field


def compute_flow_series(planes, pairs, params=FlowParams(), threads=1,
                        compensate=False, median=True):
    """Flow fields for (i, j) frame-index pairs; parallel across pairs.

    Returns {i: FlowField} keyed by the first index of each pair. Fields are
    median-filtered by default, ready for tracking.
    """
    pairs = list(pairs)

    def one(pair):
        i, j = pair
        fn = compensate_camera_motion if compensate else compute_dense_flow
        field = fn(planes[i], planes[j], params)
        return i, median_filter_flow(field) if median else field

    if threads > 1 and len(pairs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, pairs))
    else:
        results = [one(p) for p in pairs]
    return dict(results)


# ---------------------------------------------------------------------------
# .flo2 serialization
# ---------------------------------------------------------------------------

def write_flo2(field):
    header = FLO2_MAGIC + struct.pack("<HII", FLO2_VERSION,
                                      field.width, field.height)
    u = field.u.astype("<f4").tobytes()
    v = field.v.astype("<f4").tobytes()
    return header + u + v


def read_flo2(data):
    if data[:4] != FLO2_MAGIC:
        raise ValueError("not a .flo2 payload (bad magic)")
    version, width, height = struct.unpack_from("<HII", data, 4)
    if version != FLO2_VERSION:
        raise ValueError(f"unsupported .flo2 version {version}")
    count = width * height
    expected = 14 + 8 * count
    if len(data) < expected:
        raise ValueError("truncated .flo2 payload")
    u = np.frombuffer(data, dtype="<f4", count=count, offset=14)
    v = np.frombuffer(data, dtype="<f4", count=count, offset=14 + 4 * count)
    return FlowField(u=u.reshape(height, width).astype(np.float64),
                     v=v.reshape(height, width).astype(np.float64),
                     width=width, height=height)
