"""Orientation-histogram descriptors: HOG for shape, HOF/MBH for motion.

All histograms share one kernel: 9 unsigned-orientation bins over [0, 180)
degrees with bin centers at 0, 20, ..., 160, magnitude-weighted votes split
linearly between the two nearest centers, L1-normalized. There is no block
L2 normalization stage.
"""

import numpy as np

from . import kernels

N_BINS = 9
EPSILON = 1e-6
DEFAULT_CELL_RADIUS = 8


def _l1_normalize(raw):
    totals = raw.sum(axis=-1, keepdims=True)
    out = np.where(totals < EPSILON, 0.0, raw / np.where(totals == 0, 1.0, totals))
    return out


def _check_inside(xs, ys, shape):
    h, w = shape
    if np.any(xs < 0) or np.any(xs >= w) or np.any(ys < 0) or np.any(ys >= h):
        raise ValueError("descriptor center outside image bounds")


def frame_gradients(frame):
    """Centered [-1, 0, 1] differences of the luma plane, edge-replicated."""
    plane = frame[:, :, 0] if frame.ndim == 3 else frame
    plane = np.ascontiguousarray(plane, dtype=np.float64)
    gx = np.empty_like(plane)
    gy = np.empty_like(plane)
    gx[:, 1:-1] = plane[:, 2:] - plane[:, :-2]
    gx[:, 0] = plane[:, 1] - plane[:, 0]
    gx[:, -1] = plane[:, -1] - plane[:, -2]
    gy[1:-1, :] = plane[2:, :] - plane[:-2, :]
    gy[0, :] = plane[1, :] - plane[0, :]
    gy[-1, :] = plane[-1, :] - plane[-2, :]
    return gx, gy


def orientation_histograms(gx, gy, points, cell_radius):
    """L1-normalized 9-bin histograms at many (x, y) points; shape (N, 9)."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    _check_inside(pts[:, 0], pts[:, 1], gx.shape)
    if cell_radius < 1:
        raise ValueError("cell_radius must be >= 1")
    raw = kernels.orient_hists(np.ascontiguousarray(gx, dtype=np.float64),
                               np.ascontiguousarray(gy, dtype=np.float64),
                               np.ascontiguousarray(pts[:, 0]),
                               np.ascontiguousarray(pts[:, 1]),
                               int(cell_radius))
    return _l1_normalize(raw)


def orientation_histogram(gx, gy, center, cell_radius):
    """Single-point variant of orientation_histograms."""
    return orientation_histograms(gx, gy, [center], cell_radius)[0]


def hog_at(frame, point, cell_radius=DEFAULT_CELL_RADIUS):
    """Trajectory-alignable HOG: gradient histogram around one point."""
    gx, gy = frame_gradients(frame)
    return orientation_histogram(gx, gy, point, cell_radius)


def hog_at_many(frame, points, cell_radius=DEFAULT_CELL_RADIUS):
    gx, gy = frame_gradients(frame)
    return orientation_histograms(gx, gy, points, cell_radius)


def motion_histograms(field, point, cell_radius=DEFAULT_CELL_RADIUS):
    """HOF plus MBHx/MBHy at a point of a flow field.

    HOF bins the flow vectors themselves (orientation folded to [0, 180)),
    MBHx/MBHy bin the spatial gradients of the u and v components.
    """
    hof, mbh_x, mbh_y = motion_histograms_many(field, [point], cell_radius)
    return hof[0], mbh_x[0], mbh_y[0]


def motion_histograms_many(field, points, cell_radius=DEFAULT_CELL_RADIUS):
    u = np.ascontiguousarray(field.u, dtype=np.float64)
    v = np.ascontiguousarray(field.v, dtype=np.float64)
    hof = orientation_histograms(u, v, points, cell_radius)
    ux, uy = frame_gradients(u)
    vx, vy = frame_gradients(v)
    mbh_x = orientation_histograms(ux, uy, points, cell_radius)
    mbh_y = orientation_histograms(vx, vy, points, cell_radius)
    return hof, mbh_x, mbh_y
