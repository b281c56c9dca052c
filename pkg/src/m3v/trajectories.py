"""Grid seeding, tracking through flow fields, and trajectory persistence.

Tracking follows each point by bilinear-sampling the (median-filtered) flow
at its current sub-pixel position. A point that leaves the strict interior
(0 < x < W, 0 < y < H) invalidates the whole trajectory; the remaining
slots are filled with copies of the last in-bounds point so packs stay
rectangular. Coordinates are stored as float32, matching the wire format.
"""

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels

M3TP_MAGIC = b"M3TP"
M3TP_VERSION = 1


@dataclass
class Trajectory:
    points: np.ndarray  # (L+1, 2) float32, [x, y]
    valid: bool

    @property
    def length(self):
        return len(self.points) - 1


@dataclass
class TrajectoryPack:
    width: int
    height: int
    length: int           # steps per trajectory (L)
    s_flow: int
    anchors: list = field(default_factory=list)       # seed frame index each
    trajectories: list = field(default_factory=list)  # parallel to anchors
    video_id: str = ""    # informational; not serialized


def seed_points(patch_origin, patch_size, k):
    """Centers of the sqrt(K) x sqrt(K) sub-grid of a patch, as (K, 2) [x, y]."""
    root = math.isqrt(k)
    if root * root != k or k < 1:
        raise ValueError(f"K={k} is not a perfect square")
    ph, pw = patch_size
    if ph < root or pw < root:
        raise ValueError(f"patch {pw}x{ph} smaller than the {root}x{root} seed grid")
    ox, oy = patch_origin
    cell_w = pw / root
    cell_h = ph / root
    pts = np.empty((k, 2), dtype=np.float64)
    i = 0
    for gy in range(root):
        for gx in range(root):
            pts[i, 0] = ox + (gx + 0.5) * cell_w
            pts[i, 1] = oy + (gy + 0.5) * cell_h
            i += 1
    return pts


def _inside(x, y, width, height):
    return 0.0 < x < float(width) and 0.0 < y < float(height)


def track_trajectory(seed, flows):
    """Track one seed through L flow fields; see module docstring for rules."""
    if not flows:
        raise ValueError("empty flow list")
    width, height = flows[0].width, flows[0].height
    for f in flows:
        if (f.width, f.height) != (width, height):
            raise ValueError("flow fields must share dimensions")
    x, y = float(seed[0]), float(seed[1])
    if not _inside(x, y, width, height):
        raise ValueError(f"seed {seed} outside frame interior")

    n = len(flows)
    points = np.empty((n + 1, 2), dtype=np.float32)
    points[0, 0] = np.float32(x)
    points[0, 1] = np.float32(y)
    valid = True
    for step, f in enumerate(flows):
        dx = kernels.bilinear_sample(np.ascontiguousarray(f.u),
                                     np.array([x]), np.array([y]))[0]
        dy = kernels.bilinear_sample(np.ascontiguousarray(f.v),
                                     np.array([x]), np.array([y]))[0]
        x += dx
        y += dy
        px = np.float32(x)
        py = np.float32(y)
        if not _inside(float(px), float(py), width, height):
            points[step + 1:] = points[step]
            valid = False
            break
        points[step + 1, 0] = px
        points[step + 1, 1] = py
    return Trajectory(points=points, valid=valid)


def track_points(seeds, flows):
    """Track many seeds through the same flow stack."""
    return [track_trajectory(s, flows) for s in np.atleast_2d(seeds)]


# ---------------------------------------------------------------------------
# M3TP persistence
# ---------------------------------------------------------------------------

def write_m3tp(pack):
    if pack.anchors and len(pack.anchors) != len(pack.trajectories):
        raise ValueError("anchors and trajectories must be parallel lists")
    chunks = [M3TP_MAGIC,
              struct.pack("<HIIHHI", M3TP_VERSION, pack.width, pack.height,
                          pack.length, pack.s_flow, len(pack.trajectories))]
    for anchor, traj in zip(pack.anchors, pack.trajectories):
        if traj.length != pack.length:
            raise ValueError("all trajectories in a pack must share L")
        chunks.append(struct.pack("<IB", anchor, 1 if traj.valid else 0))
        chunks.append(np.ascontiguousarray(traj.points, dtype="<f4").tobytes())
    return b"".join(chunks)


def read_m3tp(data):
    if data[:4] != M3TP_MAGIC:
        raise ValueError("not an M3TP payload (bad magic)")
    header_size = 4 + struct.calcsize("<HIIHHI")
    if len(data) < header_size:
        raise ValueError("truncated M3TP header")
    version, width, height, length, s_flow, count = struct.unpack_from(
        "<HIIHHI", data, 4)
    if version != M3TP_VERSION:
        raise ValueError(f"unsupported M3TP version {version}")
    record = 5 + (length + 1) * 2 * 4
    if len(data) < header_size + record * count:
        raise ValueError("truncated M3TP trajectory records")
    anchors = []
    trajectories = []
    pos = header_size
    for _ in range(count):
        anchor, valid = struct.unpack_from("<IB", data, pos)
        pos += 5
        pts = np.frombuffer(data, dtype="<f4", count=(length + 1) * 2,
                            offset=pos).reshape(length + 1, 2).copy()
        pos += (length + 1) * 2 * 4
        anchors.append(anchor)
        trajectories.append(Trajectory(points=pts, valid=bool(valid)))
    return TrajectoryPack(width=width, height=height, length=length,
                          s_flow=s_flow, anchors=anchors,
                          trajectories=trajectories)


def save_m3tp(pack, path):
    with open(path, "wb") as fh:
        fh.write(write_m3tp(pack))


def load_m3tp(path):
    with open(path, "rb") as fh:
        return read_m3tp(fh.read())
