"""Synthetic videos with analytic ground truth, plus brute-force test oracles.

Generators produce band-limited textures so that corner detection and flow
estimation have something to grip; pure white noise aliases under subpixel
shifts. The first frame is quantized to whole numbers, so clips with integer
velocities stay integer-valued end to end and survive the u8 container
round trip bit-exactly.

The oracles here are deliberately naive (explicit per-pixel double loops,
atan2 binning) and share no code with the production kernels; they exist
only as references for the test suite.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .video_io import FrameSequence


# ---------------------------------------------------------------------------
# texture and shifting primitives
# ---------------------------------------------------------------------------

def band_limited_texture(height, width, seed, sigma=1.5, lo=16.0, hi=240.0):
    """Periodic smoothed-noise texture, quantized to whole numbers."""
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((height, width))
    radius = max(1, int(math.ceil(3 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-xs * xs / (2 * sigma * sigma))
    g /= g.sum()
    for axis in (0, 1):
        acc = np.zeros_like(noise)
        for k, wk in enumerate(g):
            acc += wk * np.roll(noise, k - radius, axis=axis)
        noise = acc
    noise -= noise.min()
    peak = noise.max()
    if peak > 0:
        noise /= peak
    return np.round(lo + noise * (hi - lo))


def periodic_shift_bilinear(img, dx, dy):
    """Shift content by (+dx, +dy) with wraparound, bilinear for subpixels."""
    h, w = img.shape
    ix = int(math.floor(dx))
    iy = int(math.floor(dy))
    fx = dx - ix
    fy = dy - iy
    base = np.roll(np.roll(img, iy, axis=0), ix, axis=1)
    if fx == 0.0 and fy == 0.0:
        return base.copy()
    right = np.roll(base, 1, axis=1)
    down = np.roll(base, 1, axis=0)
    diag = np.roll(right, 1, axis=0)
    return ((1 - fx) * (1 - fy) * base + fx * (1 - fy) * right
            + (1 - fx) * fy * down + fx * fy * diag)


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------

@dataclass
class GroundTruth:
    """Analytic motion truth for a generated clip."""

    velocity: tuple
    flows: list = field(default_factory=list)  # (H,W,2) per consecutive pair
    label: int = -1                            # 4-way direction class, -1 if n/a
    disk_centers: list = field(default_factory=list)  # per frame, per disk
    disk_radius: float = 0.0
    dims: tuple = None                         # (height, width) when wrapping
    wrap: bool = False
    disk_radii: tuple = None                   # per disk; disk_radius if None

    def on_disk(self, point, frame_index):
        if not self.disk_centers:
            return True
        radii = self.disk_radii or (self.disk_radius,) * len(
            self.disk_centers[frame_index])
        for c, radius in zip(self.disk_centers[frame_index], radii):
            dx = point[0] - c[0]
            dy = point[1] - c[1]
            if self.wrap and self.dims:
                h, w = self.dims
                dx = (dx + w / 2.0) % w - w / 2.0
                dy = (dy + h / 2.0) % h - h / 2.0
            if dx * dx + dy * dy <= radius ** 2:
                return True
        return False

    def trajectory(self, seed_xy, start_frame, length):
        """Analytic track of a point seeded at seed_xy in start_frame."""
        pts = np.empty((length + 1, 2), dtype=np.float64)
        pts[0] = seed_xy
        moving = self.on_disk(seed_xy, start_frame)
        vx, vy = self.velocity if moving else (0.0, 0.0)
        for k in range(1, length + 1):
            pts[k, 0] = pts[0, 0] + k * vx
            pts[k, 1] = pts[0, 1] + k * vy
        return pts


def gen_translating_texture(dims, velocity, n_frames, seed):
    """Texture translated by `velocity` per frame with periodic wrap.

    dims is (height, width). Ground-truth flow is the constant velocity
    everywhere. Integer velocities produce bit-exact rolled frames.
    """
    height, width = dims
    vx, vy = float(velocity[0]), float(velocity[1])
    if max(abs(vx), abs(vy)) > 20.0:
        raise ValueError("velocity exceeds the flow bound of 20 px/frame")
    base = band_limited_texture(height, width, seed)
    frames = [base]
    for _ in range(n_frames - 1):
        frames.append(periodic_shift_bilinear(frames[-1], vx, vy))
    seq = FrameSequence(frames=[f[:, :, None].copy() for f in frames],
                        width=width, height=height, channels=1)
    flow = np.empty((height, width, 2), dtype=np.float64)
    flow[:, :, 0] = vx
    flow[:, :, 1] = vy
    truth = GroundTruth(velocity=(vx, vy),
                        flows=[flow.copy() for _ in range(n_frames - 1)])
    return seq, truth


def _disk_mask(height, width, center, radius, wrap=False):
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    dx = xs - center[0]
    dy = ys - center[1]
    if wrap:
        dx = (dx + width / 2.0) % width - width / 2.0
        dy = (dy + height / 2.0) % height - height / 2.0
    return dx * dx + dy * dy <= radius ** 2


def gen_moving_disk(dims, disk_radius, velocity, n_frames, seed,
                    centers=None, label=-1, background_sigma=1.5,
                    disk_sigma=1.0, wrap=False, background_range=(16.0, 240.0),
                    disk_range=(16.0, 240.0)):
    """Textured disk(s) translating over a static textured background.

    Analytic flow is `velocity` inside each disk and zero elsewhere. If no
    start centers are given a single disk is placed so that it stays inside
    the frame for the whole clip when possible, else it starts centered.
    Larger background_sigma makes the backdrop smoother and its masked
    content more inferable from spatial context. With wrap=True disk centers
    move on a torus, so speed and duration are unconstrained by the frame;
    tracked points still leave the field of view at the seam and get
    invalidated, which is exactly the loss-mask case. Disjoint brightness
    ranges give the disks high contrast against the backdrop.
    """
    height, width = dims
    vx, vy = float(velocity[0]), float(velocity[1])
    if max(abs(vx), abs(vy)) > 20.0:
        raise ValueError("velocity exceeds the flow bound of 20 px/frame")
    background = band_limited_texture(height, width, seed, sigma=background_sigma,
                                      lo=background_range[0], hi=background_range[1])
    disk_tex = band_limited_texture(height, width, seed + 1, sigma=disk_sigma,
                                    lo=disk_range[0], hi=disk_range[1])

    if centers is None:
        travel_x = vx * (n_frames - 1)
        travel_y = vy * (n_frames - 1)
        cx = (width - 1) / 2.0 - travel_x / 2.0
        cy = (height - 1) / 2.0 - travel_y / 2.0
        if not wrap:
            lo_x, hi_x = disk_radius, width - 1 - disk_radius - max(travel_x, 0.0)
            lo_x -= min(travel_x, 0.0)
            lo_y, hi_y = disk_radius, height - 1 - disk_radius - max(travel_y, 0.0)
            lo_y -= min(travel_y, 0.0)
            if lo_x <= hi_x:
                cx = min(max(cx, lo_x), hi_x)
            if lo_y <= hi_y:
                cy = min(max(cy, lo_y), hi_y)
        centers = [(cx, cy)]

    frames = []
    per_frame_centers = []
    flows = []
    for k in range(n_frames):
        frame = background.copy()
        frame_centers = []
        for cx0, cy0 in centers:
            c = (cx0 + k * vx, cy0 + k * vy)
            if wrap:
                c = (c[0] % width, c[1] % height)
            frame_centers.append(c)
            if disk_radius > 0:
                mask = _disk_mask(height, width, c, disk_radius, wrap)
                tex = periodic_shift_bilinear(disk_tex, c[0] - cx0, c[1] - cy0)
                frame[mask] = tex[mask]
        frames.append(frame)
        per_frame_centers.append(frame_centers)
        if k < n_frames - 1:
            flow = np.zeros((height, width, 2), dtype=np.float64)
            for c in frame_centers:
                if disk_radius > 0:
                    mask = _disk_mask(height, width, c, disk_radius, wrap)
                    flow[mask, 0] = vx
                    flow[mask, 1] = vy
            flows.append(flow)

    seq = FrameSequence(frames=[f[:, :, None].copy() for f in frames],
                        width=width, height=height, channels=1)
    truth = GroundTruth(velocity=(vx, vy), flows=flows, label=label,
                        disk_centers=per_frame_centers, disk_radius=disk_radius,
                        dims=(height, width), wrap=wrap)
    return seq, truth


def analytic_flow_fields(truth, starts, s_flow, median=True):
    """Pipeline-ready FlowFields from a clip's analytic ground truth.

    Strides above 1 are composed by stepping each pixel through the
    per-frame fields. Starts reaching past the last frame yield zero fields
    (frozen video end), matching compute_required_flows.
    """
    from .flow import FlowField, median_filter_flow

    n_steps = len(truth.flows)
    h, w = truth.flows[0].shape[:2] if n_steps else truth.dims
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    out = {}
    for t in starts:
        if t + s_flow > n_steps:
            uv = np.zeros((h, w, 2), dtype=np.float64)
        elif s_flow == 1:
            uv = truth.flows[t].copy()
        else:
            from . import kernels

            disp = truth.flows[t].copy()
            for k in range(1, s_flow):
                px = (xs + disp[:, :, 0]).ravel()
                py = (ys + disp[:, :, 1]).ravel()
                fu = kernels.bilinear_sample_np(truth.flows[t + k][:, :, 0], px, py)
                fv = kernels.bilinear_sample_np(truth.flows[t + k][:, :, 1], px, py)
                disp[:, :, 0] += fu.reshape(h, w)
                disp[:, :, 1] += fv.reshape(h, w)
            uv = disp
        f = FlowField.from_uv(uv)
        out[t] = median_filter_flow(f) if median else f
    return out


DIRECTION_VELOCITIES = ((1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0))


def make_direction_dataset(n_clips, dims, n_frames, seed,
                           disk_radius=4.0, speed=1.0, n_disks=2,
                           background_sigma=4.0, disk_sigma=1.0, wrap=False,
                           background_range=(16.0, 240.0),
                           disk_range=(16.0, 240.0)):
    """Balanced 4-way moving-disk dataset: labels cycle through +x/-x/+y/-y.

    Without wrap, disk start positions are randomized inside the band that
    keeps each disk in frame for the whole clip; with wrap they land
    anywhere and the centers move on a torus.
    """
    height, width = dims
    rng = np.random.default_rng(seed)
    clips = []
    travel = speed * (n_frames - 1)
    radii = (tuple(disk_radius) if np.iterable(disk_radius)
             else (disk_radius,) * n_disks)
    for i in range(n_clips):
        label = i % 4
        vx, vy = (speed * d for d in DIRECTION_VELOCITIES[label])
        centers = []
        for radius in radii:
            if wrap:
                centers.append((rng.uniform(0, width), rng.uniform(0, height)))
                continue
            lo_x = radius + 1 - min(vx * (n_frames - 1), 0.0)
            hi_x = width - 2 - radius - max(vx * (n_frames - 1), 0.0)
            lo_y = radius + 1 - min(vy * (n_frames - 1), 0.0)
            hi_y = height - 2 - radius - max(vy * (n_frames - 1), 0.0)
            if lo_x > hi_x or lo_y > hi_y:
                raise ValueError(
                    f"disk of radius {radius} travelling {travel} px "
                    f"cannot stay inside a {width}x{height} frame"
                )
            centers.append((rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y)))
        clip_seed = int(rng.integers(0, 2 ** 31))
        clips.append(_gen_multi_radius_disks(dims, radii, (vx, vy), n_frames,
                                             clip_seed, centers, label,
                                             background_sigma, disk_sigma, wrap,
                                             background_range, disk_range))
    return clips


def _gen_multi_radius_disks(dims, radii, velocity, n_frames, seed, centers,
                            label, background_sigma, disk_sigma, wrap,
                            background_range, disk_range):
    """Scene with disks of possibly different radii, one shared velocity."""
    height, width = dims
    vx, vy = velocity
    background = band_limited_texture(height, width, seed, sigma=background_sigma,
                                      lo=background_range[0], hi=background_range[1])
    disk_tex = band_limited_texture(height, width, seed + 1, sigma=disk_sigma,
                                    lo=disk_range[0], hi=disk_range[1])
    frames = []
    per_frame_centers = []
    flows = []
    for k in range(n_frames):
        frame = background.copy()
        frame_centers = []
        for (cx0, cy0), radius in zip(centers, radii):
            c = (cx0 + k * vx, cy0 + k * vy)
            if wrap:
                c = (c[0] % width, c[1] % height)
            frame_centers.append(c)
            if radius > 0:
                mask = _disk_mask(height, width, c, radius, wrap)
                tex = periodic_shift_bilinear(disk_tex, c[0] - cx0, c[1] - cy0)
                frame[mask] = tex[mask]
        frames.append(frame)
        per_frame_centers.append(frame_centers)
        if k < n_frames - 1:
            flow = np.zeros((height, width, 2), dtype=np.float64)
            for c, radius in zip(frame_centers, radii):
                if radius > 0:
                    mask = _disk_mask(height, width, c, radius, wrap)
                    flow[mask, 0] = vx
                    flow[mask, 1] = vy
            flows.append(flow)
    seq = FrameSequence(frames=[f[:, :, None].copy() for f in frames],
                        width=width, height=height, channels=1)
    truth = GroundTruth(velocity=(vx, vy), flows=flows, label=label,
                        disk_centers=per_frame_centers,
                        disk_radius=max(radii), dims=(height, width), wrap=wrap,
                        disk_radii=tuple(radii))
    return seq, truth


# ---------------------------------------------------------------------------
# naive oracles (test references only)
# ---------------------------------------------------------------------------

def orientation_hist_oracle(gx, gy, cx, cy, radius):
    """Reference 9-bin histogram: explicit double loop, atan2 binning."""
    h, w = gx.shape
    cx = int(round(float(cx)))
    cy = int(round(float(cy)))
    bins = [0.0] * 9
    for dy in range(-radius, radius + 1):
        yy = cy + dy
        if yy < 0:
            yy = 0
        if yy > h - 1:
            yy = h - 1
        for dx in range(-radius, radius + 1):
            xx = cx + dx
            if xx < 0:
                xx = 0
            if xx > w - 1:
                xx = w - 1
            vx = float(gx[yy, xx])
            vy = float(gy[yy, xx])
            mag = math.sqrt(vx * vx + vy * vy)
            if mag == 0.0:
                continue
            ang = math.degrees(math.atan2(vy, vx))
            while ang < 0.0:
                ang += 180.0
            while ang >= 180.0:
                ang -= 180.0
            pos = ang / 20.0
            lo = int(math.floor(pos))
            frac = pos - lo
            if lo >= 9:
                lo = 8
                frac = 1.0
            hi = lo + 1
            if hi >= 9:
                hi = 0
            bins[lo] += mag * (1.0 - frac)
            bins[hi] += mag * frac
    total = sum(bins)
    if total < 1e-6:
        return np.zeros(9, dtype=np.float64)
    return np.array([b / total for b in bins], dtype=np.float64)


def _grad_oracle(plane):
    """Centered [-1, 0, 1] differences with edge replication, naive loops."""
    h, w = plane.shape
    gx = np.zeros((h, w), dtype=np.float64)
    gy = np.zeros((h, w), dtype=np.float64)
    for y in range(h):
        for x in range(w):
            xl = x - 1 if x > 0 else 0
            xr = x + 1 if x < w - 1 else w - 1
            yt = y - 1 if y > 0 else 0
            yb = y + 1 if y < h - 1 else h - 1
            gx[y, x] = plane[y, xr] - plane[y, xl]
            gy[y, x] = plane[yb, x] - plane[yt, x]
    return gx, gy


def hog_oracle(frame, point, cell_radius):
    """Reference HOG at a point; independent of the production kernels."""
    plane = frame[:, :, 0] if frame.ndim == 3 else frame
    gx, gy = _grad_oracle(np.asarray(plane, dtype=np.float64))
    return orientation_hist_oracle(gx, gy, point[0], point[1], cell_radius)


def motion_histograms_oracle(flow_u, flow_v, point, cell_radius):
    """Reference HOF / MBHx / MBHy at a point."""
    hof = orientation_hist_oracle(flow_u, flow_v, point[0], point[1], cell_radius)
    ux, uy = _grad_oracle(flow_u)
    vx, vy = _grad_oracle(flow_v)
    mbh_x = orientation_hist_oracle(ux, uy, point[0], point[1], cell_radius)
    mbh_y = orientation_hist_oracle(vx, vy, point[0], point[1], cell_radius)
    return hof, mbh_x, mbh_y


def median3x3_oracle(a):
    """Per-pixel sorted 3x3 window median with edge replication."""
    h, w = a.shape
    out = np.empty_like(a)
    for y in range(h):
        for x in range(w):
            vals = []
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    yy = min(max(y + dy, 0), h - 1)
                    xx = min(max(x + dx, 0), w - 1)
                    vals.append(a[yy, xx])
            vals.sort()
            out[y, x] = vals[4]
    return out


def masked_mean_oracle(pred, target, included):
    """Mean squared error over included components, naive accumulation."""
    total = 0.0
    count = 0
    flat_p = np.asarray(pred, dtype=np.float64).ravel()
    flat_t = np.asarray(target, dtype=np.float64).ravel()
    flat_m = np.asarray(included, dtype=bool).ravel()
    for i in range(flat_p.size):
        if flat_m[i]:
            d = flat_p[i] - flat_t[i]
            total += d * d
            count += 1
    return total / count if count else 0.0


# ---------------------------------------------------------------------------
# container writers (consumed by the video_io round-trip tests and the CLI)
# ---------------------------------------------------------------------------

def _quantize(plane):
    return np.clip(np.round(plane), 0, 255).astype(np.uint8)


def write_y4m(seq, colorspace="C420"):
    """Encode a grayscale FrameSequence as Y4M bytes (chroma written neutral)."""
    if colorspace not in ("Cmono", "C420", "C420mpeg2"):
        raise ValueError(f"unsupported colorspace {colorspace}")
    if colorspace != "Cmono" and (seq.width % 2 or seq.height % 2):
        raise ValueError("4:2:0 requires even dimensions")
    num = int(round(seq.frame_rate * 1000))
    header = f"YUV4MPEG2 W{seq.width} H{seq.height} F{num}:1000 {colorspace}\n"
    chunks = [header.encode("ascii")]
    chroma = b"\x80" * ((seq.width // 2) * (seq.height // 2) * 2)
    for frame in seq.frames:
        chunks.append(b"FRAME\n")
        chunks.append(_quantize(frame[:, :, 0]).tobytes())
        if colorspace != "Cmono":
            chunks.append(chroma)
    return b"".join(chunks)


def save_y4m(seq, path, colorspace="C420"):
    with open(path, "wb") as fh:
        fh.write(write_y4m(seq, colorspace))


def write_pgm(frame):
    plane = frame[:, :, 0] if frame.ndim == 3 else frame
    h, w = plane.shape
    return f"P5 {w} {h} 255\n".encode("ascii") + _quantize(plane).tobytes()


def write_ppm(frame):
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ValueError("write_ppm expects an (H, W, 3) frame")
    h, w = frame.shape[:2]
    return f"P6 {w} {h} 255\n".encode("ascii") + _quantize(frame).tobytes()


def save_image_sequence(seq, directory, prefix="frame"):
    """Write one PGM (gray) or PPM (RGB) per frame; returns the paths."""
    import os

    paths = []
    for i, frame in enumerate(seq.frames):
        ext = "pgm" if seq.channels == 1 else "ppm"
        path = os.path.join(directory, f"{prefix}_{i:05d}.{ext}")
        data = write_pgm(frame) if seq.channels == 1 else write_ppm(frame)
        with open(path, "wb") as fh:
            fh.write(data)
        paths.append(path)
    return paths
