"""Patch grids, tube/cube masks, sampling plans, and motion-target assembly.

A target is assembled per masked 3D patch. For the trajectory kind it holds
per-step relative displacements (position part, K x L x 2) and per-step HOG
descriptors along each track (shape part, K x L x 9); baseline kinds
substitute the analogous tensors. Every part is normalized per patch to zero
mean, unit std, with statistics taken over valid trajectories only; invalid
trajectories are stored as zeros and excluded from the loss via the
component mask.
"""

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import descriptors
from .flow import FlowField, FlowParams, compute_flow_series
from .trajectories import Trajectory, TrajectoryPack, seed_points, track_trajectory

M3VT_MAGIC = b"M3VT"
M3VT_VERSION = 1

TARGET_KINDS = ("pixel", "hog", "hog+flow", "hog+hof", "hog+mbh",
                "trajectory", "trajectory_no_shape")
_KIND_CODES = {k: i for i, k in enumerate(TARGET_KINDS)}
_MASK_CODES = {"tube": 0, "cube": 1}

CLIP_LEN = 16
DEGENERATE_STD = 1e-6


# ---------------------------------------------------------------------------
# grid / mask / plan
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PatchGrid:
    frames: int
    height: int
    width: int
    t: int
    h: int
    w: int

    @property
    def nt(self):
        return self.frames // self.t

    @property
    def ny(self):
        return self.height // self.h

    @property
    def nx(self):
        return self.width // self.w

    @property
    def n_patches(self):
        return self.nt * self.ny * self.nx

    @property
    def n_spatial(self):
        return self.ny * self.nx

    def linear(self, ti, yi, xi):
        return (ti * self.ny + yi) * self.nx + xi

    def unravel(self, index):
        ti, rest = divmod(index, self.n_spatial)
        yi, xi = divmod(rest, self.nx)
        return ti, yi, xi

    def spatial_origin(self, yi, xi):
        return (xi * self.w, yi * self.h)


def build_patch_grid(frames, height, width, t=2, h=16, w=16):
    for dim, p, name in ((frames, t, "t"), (height, h, "h"), (width, w, "w")):
        if p < 1 or dim % p:
            raise ValueError(
                f"patch size {name}={p} does not divide clip dimension {dim}"
            )
    return PatchGrid(frames=frames, height=height, width=width, t=t, h=h, w=w)


@dataclass
class MaskMap:
    mask: np.ndarray  # (nt, ny, nx) bool
    mask_type: str
    ratio: float
    seed: int

    @property
    def masked_count(self):
        return int(self.mask.sum())

    def masked_linear(self):
        return np.flatnonzero(self.mask.reshape(-1))

    def visible_linear(self):
        return np.flatnonzero(~self.mask.reshape(-1))


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def generate_mask(grid, mask_type, ratio, rng_seed):
    """Tube masks pick spatial cells shared by all temporal slices; cube
    masks pick patches independently. Counts follow round-half-up."""
    if not 0.0 < ratio < 1.0:
        raise ValueError("mask ratio must be in (0, 1)")
    if mask_type not in _MASK_CODES:
        raise ValueError(f"unknown mask type {mask_type!r}")
    rng = np.random.default_rng(rng_seed)
    mask = np.zeros((grid.nt, grid.ny, grid.nx), dtype=bool)
    if mask_type == "tube":
        total = grid.n_spatial
        count = _round_half_up(ratio * total)
        if count < 1 or count >= total:
            raise ValueError(
                f"ratio {ratio} masks {count} of {total} spatial cells"
            )
        chosen = rng.choice(total, size=count, replace=False)
        spatial = np.zeros(total, dtype=bool)
        spatial[chosen] = True
        mask[:] = spatial.reshape(grid.ny, grid.nx)[None, :, :]
    else:
        total = grid.n_patches
        count = _round_half_up(ratio * total)
        if count < 1 or count >= total:
            raise ValueError(f"ratio {ratio} masks {count} of {total} patches")
        chosen = rng.choice(total, size=count, replace=False)
        flat = mask.reshape(-1)
        flat[chosen] = True
    return MaskMap(mask=mask, mask_type=mask_type, ratio=float(ratio),
                   seed=int(rng_seed))


@dataclass(frozen=True)
class SamplingPlan:
    input_indices: tuple
    s_rgb: int
    s_flow: int
    interpolate: bool
    offset: int

    def anchors(self, grid):
        """Raw index of the first frame of each temporal patch."""
        return [self.input_indices[ti * grid.t] for ti in range(grid.nt)]


def plan_sampling(video_len, s_rgb=2, interpolate=True, offset=0,
                  clip_len=CLIP_LEN):
    if s_rgb < 1:
        raise ValueError("s_rgb must be >= 1")
    if offset < 0:
        raise ValueError("offset must be >= 0")
    needed = offset + clip_len * s_rgb
    if video_len < needed:
        raise ValueError(
            f"video of {video_len} frames too short for {clip_len} frames "
            f"at stride {s_rgb} from offset {offset} (needs {needed})"
        )
    indices = tuple(offset + i * s_rgb for i in range(clip_len))
    return SamplingPlan(input_indices=indices, s_rgb=s_rgb,
                        s_flow=1 if interpolate else s_rgb,
                        interpolate=bool(interpolate), offset=offset)


# ---------------------------------------------------------------------------
# target configuration and assembly
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TargetConfig:
    length: int = 6        # trajectory steps (L)
    k: int = 4             # trajectories per patch
    target_kind: str = "trajectory"

    def __post_init__(self):
        if self.length < 0:
            raise ValueError("trajectory length must be >= 0")
        root = math.isqrt(self.k)
        if root * root != self.k or self.k < 1:
            raise ValueError("K must be a perfect square")
        if self.target_kind not in TARGET_KINDS:
            raise ValueError(f"unknown target kind {self.target_kind!r}")

    def part_names(self):
        return {
            "pixel": ("pixel",),
            "hog": ("hog",),
            "hog+flow": ("hog", "flow"),
            "hog+hof": ("hog", "hof"),
            "hog+mbh": ("hog", "mbh"),
            "trajectory": ("position", "shape"),
            "trajectory_no_shape": ("hog", "position"),
        }[self.target_kind]

    def part_shapes(self, grid):
        k, length = self.k, self.length
        return {
            "pixel": (grid.t, grid.h, grid.w),
            "hog": (k, 9),
            "flow": (grid.h, grid.w, 2),
            "hof": (k, 9),
            "mbh": (k, 2, 9),
            "position": (k, length, 2),
            "shape": (k, length, 9),
        }

    def prediction_dim(self, grid):
        shapes = self.part_shapes(grid)
        return int(sum(np.prod(shapes[name]) for name in self.part_names()))

    def needs_trajectories(self):
        return self.target_kind in ("trajectory", "trajectory_no_shape")

    def needs_flow(self):
        return self.target_kind in ("hog+flow", "hog+hof", "hog+mbh") \
            or self.needs_trajectories()


@dataclass
class TrajectoryMotionTarget:
    patch_index: int
    validity: np.ndarray          # (K,) bool
    parts: dict                   # name -> normalized array
    raw_parts: dict               # name -> unnormalized array
    vector: np.ndarray            # (prediction_dim,) float32


def patch_normalize(raw, include=None):
    """Standard-score over included entries; excluded entries become zero.

    If the included values have std below 1e-6 they are only mean-subtracted.
    """
    raw = np.asarray(raw, dtype=np.float64)
    out = np.zeros_like(raw)
    if include is None:
        vals = raw
    else:
        include = np.asarray(include, dtype=bool)
        vals = raw[include]
        if vals.size == 0:
            return out
    mu = vals.mean()
    sd = vals.std()
    norm = (vals - mu) if sd < DEGENERATE_STD else (vals - mu) / sd
    if include is None:
        return norm
    out[include] = norm
    return out


def component_mask(validity, config, grid):
    """Per-component loss inclusion derived from trajectory validity."""
    shapes = config.part_shapes(grid)
    chunks = []
    for name in config.part_names():
        shape = shapes[name]
        size = int(np.prod(shape))
        if name in ("position", "shape"):
            per_traj = size // config.k
            chunks.append(np.repeat(np.asarray(validity, dtype=bool), per_traj))
        else:
            chunks.append(np.ones(size, dtype=bool))
    return np.concatenate(chunks)


class _DescriptorCache:
    """Lazy per-frame gradients so HOG extraction runs once per frame."""

    def __init__(self, planes):
        self.planes = planes
        self._grads = {}

    def clamp(self, index):
        return min(max(index, 0), len(self.planes) - 1)

    def gradients(self, index):
        index = self.clamp(index)
        if index not in self._grads:
            self._grads[index] = descriptors.frame_gradients(self.planes[index])
        return self._grads[index]


def _zero_flow(width, height):
    z = np.zeros((height, width), dtype=np.float64)
    return FlowField(u=z, v=z.copy(), width=width, height=height)


def required_flow_starts(plan, grid, config):
    """Raw frame indices t whose (t, t + s_flow) flow the targets need."""
    starts = set()
    if config.needs_trajectories():
        for a in plan.anchors(grid):
            for j in range(config.length):
                starts.add(a + j * plan.s_flow)
    elif config.needs_flow():
        starts.update(plan.anchors(grid))
    return sorted(starts)


def compute_required_flows(planes, plan, grid, config, flow_params=None,
                           threads=1, compensate=False):
    """Median-filtered flow fields keyed by start index.

    Pairs that would reach past the last frame get a zero field (the video
    is treated as frozen at its end).
    """
    params = flow_params or FlowParams()
    height, width = planes[0].shape
    starts = required_flow_starts(plan, grid, config)
    pairs = [(t, t + plan.s_flow) for t in starts if t + plan.s_flow < len(planes)]
    flows = compute_flow_series(planes, pairs, params, threads=threads,
                                compensate=compensate, median=True)
    for t in starts:
        if t not in flows:
            flows[t] = _zero_flow(width, height)
    return flows


def assemble_motion_target(patch_idx3, grid, plan, config, planes, flows,
                           trajectories=None, cache=None):
    """Build one masked patch's target.

    `planes` are the raw video luma planes, `flows` a dict keyed by start
    frame index holding median-filtered FlowFields at stride s_flow, and
    `trajectories` the K tracks seeded on this patch (tracked here if None).
    """
    ti, yi, xi = patch_idx3
    cache = cache or _DescriptorCache(planes)
    anchor = plan.anchors(grid)[ti]
    origin = grid.spatial_origin(yi, xi)
    seeds = seed_points(origin, (grid.h, grid.w), config.k)

    if config.needs_trajectories() and trajectories is None:
        stack = [flows[anchor + j * plan.s_flow] for j in range(config.length)]
        trajectories = [track_trajectory(s, stack) for s in seeds]

    validity = (np.array([t.valid for t in trajectories], dtype=bool)
                if trajectories is not None
                else np.ones(config.k, dtype=bool))

    raw_parts = {}
    parts = {}
    shapes = config.part_shapes(grid)
    for name in config.part_names():
        if name == "position":
            raw = np.zeros(shapes[name], dtype=np.float64)
            for k, traj in enumerate(trajectories):
                if traj.valid:
                    raw[k] = np.diff(traj.points.astype(np.float64), axis=0)
            include = np.broadcast_to(validity[:, None, None], raw.shape)
            norm = patch_normalize(raw, include)
        elif name == "shape":
            raw = np.zeros(shapes[name], dtype=np.float64)
            for k, traj in enumerate(trajectories):
                if not traj.valid:
                    continue
                for i in range(config.length):
                    gx, gy = cache.gradients(anchor + i * plan.s_flow)
                    raw[k, i] = descriptors.orientation_histogram(
                        gx, gy, traj.points[i], descriptors.DEFAULT_CELL_RADIUS)
            include = np.broadcast_to(validity[:, None, None], raw.shape)
            norm = patch_normalize(raw, include)
        elif name == "pixel":
            raw = np.empty(shapes[name], dtype=np.float64)
            x0, y0 = origin
            for dt in range(grid.t):
                idx = plan.input_indices[ti * grid.t + dt]
                raw[dt] = planes[cache.clamp(idx)][y0:y0 + grid.h, x0:x0 + grid.w]
            norm = patch_normalize(raw)
        elif name == "hog":
            mid = plan.input_indices[ti * grid.t + grid.t // 2]
            gx, gy = cache.gradients(mid)
            raw = descriptors.orientation_histograms(
                gx, gy, seeds, descriptors.DEFAULT_CELL_RADIUS)
            norm = patch_normalize(raw)
        elif name == "flow":
            f = flows[anchor]
            x0, y0 = origin
            raw = np.stack([f.u[y0:y0 + grid.h, x0:x0 + grid.w],
                            f.v[y0:y0 + grid.h, x0:x0 + grid.w]], axis=-1)
            norm = patch_normalize(raw)
        elif name == "hof":
            hof, _, _ = descriptors.motion_histograms_many(flows[anchor], seeds)
            raw = hof
            norm = patch_normalize(raw)
        elif name == "mbh":
            _, mbh_x, mbh_y = descriptors.motion_histograms_many(
                flows[anchor], seeds)
            raw = np.stack([mbh_x, mbh_y], axis=1)
            norm = patch_normalize(raw)
        else:  # pragma: no cover
            raise AssertionError(name)
        raw_parts[name] = raw
        parts[name] = norm

    vector = np.concatenate([parts[n].ravel() for n in config.part_names()])
    return TrajectoryMotionTarget(
        patch_index=grid.linear(ti, yi, xi),
        validity=validity,
        parts=parts,
        raw_parts=raw_parts,
        vector=vector.astype(np.float32),
    )


def build_clip_targets(planes, plan, grid, mask, config, flow_params=None,
                       threads=1, compensate=False, flows=None):
    """Targets for every masked patch of a clip, plus the trajectory pack.

    Returns (targets in linear patch order, TrajectoryPack).
    """
    if flows is None:
        flows = (compute_required_flows(planes, plan, grid, config,
                                        flow_params, threads, compensate)
                 if config.needs_flow() else {})
    cache = _DescriptorCache(planes)
    height, width = planes[0].shape
    pack = TrajectoryPack(width=width, height=height, length=config.length,
                          s_flow=plan.s_flow)
    targets = []
    for index in mask.masked_linear():
        ti, yi, xi = grid.unravel(int(index))
        trajectories = None
        if config.needs_trajectories():
            anchor = plan.anchors(grid)[ti]
            stack = [flows[anchor + j * plan.s_flow]
                     for j in range(config.length)]
            seeds = seed_points(grid.spatial_origin(yi, xi),
                                (grid.h, grid.w), config.k)
            trajectories = [track_trajectory(s, stack) for s in seeds]
            for traj in trajectories:
                pack.anchors.append(anchor)
                pack.trajectories.append(traj)
        targets.append(assemble_motion_target((ti, yi, xi), grid, plan, config,
                                              planes, flows, trajectories,
                                              cache))
    return targets, pack


# ---------------------------------------------------------------------------
# training-clip container
# ---------------------------------------------------------------------------

@dataclass
class TrainingClip:
    """One clip prepared for the autoencoder: inputs plus masked targets."""

    patches: np.ndarray          # (N, t*h*w) float32, multi-frame input
    visible_idx: np.ndarray      # (Nv,) int64
    masked_idx: np.ndarray       # (Nm,) int64
    target: np.ndarray           # (Nm, pred_dim) float32
    component_mask: np.ndarray   # (Nm, pred_dim) bool
    patches_static: np.ndarray = None  # single-frame replicated variant
    n_invalid: int = 0
    label: int = -1


def patchify(input_planes, grid):
    """(16, H, W) input frames to (N, t*h*w) patch vectors in [-0.5, 0.5]."""
    a = np.asarray(input_planes, dtype=np.float32) / 255.0 - 0.5
    t, h, w = grid.t, grid.h, grid.w
    a = a.reshape(grid.nt, t, grid.ny, h, grid.nx, w)
    a = a.transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(a.reshape(grid.n_patches, t * h * w))


def make_training_clip(planes, plan, grid, mask, config, flow_params=None,
                       threads=1, compensate=False, flows=None,
                       static_slot=None, label=-1):
    """Assemble a TrainingClip from raw planes; see build_clip_targets."""
    tgts, _ = build_clip_targets(planes, plan, grid, mask, config,
                                 flow_params, threads, compensate, flows)
    input_planes = np.stack([planes[i] for i in plan.input_indices])
    patches = patchify(input_planes, grid)
    static = None
    if static_slot is not None:
        static_planes = np.stack([input_planes[static_slot]] * len(input_planes))
        static = patchify(static_planes, grid)
    target = np.stack([t.vector for t in tgts])
    comp = np.stack([component_mask(t.validity, config, grid) for t in tgts])
    n_invalid = int(sum((~t.validity).sum() for t in tgts))
    return TrainingClip(
        patches=patches,
        visible_idx=mask.visible_linear().astype(np.int64),
        masked_idx=mask.masked_linear().astype(np.int64),
        target=target.astype(np.float32),
        component_mask=comp,
        patches_static=static,
        n_invalid=n_invalid,
        label=label,
    )


# ---------------------------------------------------------------------------
# M3VT persistence
# ---------------------------------------------------------------------------

@dataclass
class TargetFile:
    grid: PatchGrid
    config: TargetConfig
    mask_type: str
    mask_seed: int
    ratio: float
    s_rgb: int
    s_flow: int
    patch_indices: np.ndarray    # (n,) int64
    validity: np.ndarray         # (n, K) bool
    vectors: np.ndarray          # (n, pred_dim) float32


def write_m3vt(targets, grid, mask, plan, config):
    pred_dim = config.prediction_dim(grid)
    header = M3VT_MAGIC + struct.pack(
        "<HIIIHHHHHBBQfHH",
        M3VT_VERSION, grid.frames, grid.height, grid.width,
        grid.t, grid.h, grid.w, config.k, config.length,
        _KIND_CODES[config.target_kind], _MASK_CODES[mask.mask_type],
        mask.seed & 0xFFFFFFFFFFFFFFFF, float(mask.ratio),
        plan.s_rgb, plan.s_flow,
    ) + struct.pack("<I", len(targets))
    chunks = [header]
    for tgt in targets:
        if tgt.vector.shape != (pred_dim,):
            raise ValueError("target vector length mismatch")
        chunks.append(struct.pack("<I", tgt.patch_index))
        chunks.append(np.asarray(tgt.validity, dtype=np.uint8).tobytes())
        chunks.append(np.ascontiguousarray(tgt.vector, dtype="<f4").tobytes())
    return b"".join(chunks)


def read_m3vt(data):
    if data[:4] != M3VT_MAGIC:
        raise ValueError("not an M3VT payload (bad magic)")
    head = struct.calcsize("<HIIIHHHHHBBQfHH")
    if len(data) < 4 + head + 4:
        raise ValueError("truncated M3VT header")
    (version, frames, height, width, t, h, w, k, length, kind_code,
     mask_code, mask_seed, ratio, s_rgb, s_flow) = struct.unpack_from(
        "<HIIIHHHHHBBQfHH", data, 4)
    if version != M3VT_VERSION:
        raise ValueError(f"unsupported M3VT version {version}")
    (count,) = struct.unpack_from("<I", data, 4 + head)
    grid = build_patch_grid(frames, height, width, t, h, w)
    kinds = {v: n for n, v in _KIND_CODES.items()}
    masks = {v: n for n, v in _MASK_CODES.items()}
    config = TargetConfig(length=length, k=k, target_kind=kinds[kind_code])
    pred_dim = config.prediction_dim(grid)
    record = 4 + k + 4 * pred_dim
    pos = 4 + head + 4
    if len(data) < pos + record * count:
        raise ValueError("truncated M3VT records")
    indices = np.empty(count, dtype=np.int64)
    validity = np.empty((count, k), dtype=bool)
    vectors = np.empty((count, pred_dim), dtype=np.float32)
    for i in range(count):
        (indices[i],) = struct.unpack_from("<I", data, pos)
        pos += 4
        validity[i] = np.frombuffer(data, dtype=np.uint8, count=k,
                                    offset=pos).astype(bool)
        pos += k
        vectors[i] = np.frombuffer(data, dtype="<f4", count=pred_dim,
                                   offset=pos)
        pos += 4 * pred_dim
    return TargetFile(grid=grid, config=config, mask_type=masks[mask_code],
                      mask_seed=mask_seed, ratio=ratio, s_rgb=s_rgb,
                      s_flow=s_flow, patch_indices=indices,
                      validity=validity, vectors=vectors)


def training_clip_from_file(planes, tfile, offset=0, static_slot=None,
                            label=-1):
    """Rebuild a TrainingClip from raw planes plus a parsed .m3vt file."""
    grid, config = tfile.grid, tfile.config
    plan = plan_sampling(len(planes), tfile.s_rgb,
                         interpolate=tfile.s_flow == 1, offset=offset)
    input_planes = np.stack([planes[i] for i in plan.input_indices])
    patches = patchify(input_planes, grid)
    static = None
    if static_slot is not None:
        static_planes = np.stack([input_planes[static_slot]] * len(input_planes))
        static = patchify(static_planes, grid)
    comp = np.stack([component_mask(v, config, grid) for v in tfile.validity])
    all_idx = np.arange(grid.n_patches, dtype=np.int64)
    masked = tfile.patch_indices.astype(np.int64)
    visible = np.setdiff1d(all_idx, masked)
    return TrainingClip(
        patches=patches,
        visible_idx=visible,
        masked_idx=masked,
        target=tfile.vectors.astype(np.float32),
        component_mask=comp,
        patches_static=static,
        n_invalid=int((~tfile.validity).sum()),
        label=label,
    )
