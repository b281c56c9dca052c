import numpy as np
import pytest

from m3v import synth
from m3v.descriptors import (frame_gradients, hog_at, motion_histograms,
                             orientation_histogram)
from m3v.flow import FlowField


def _flow(u, v):
    u = np.asarray(u, dtype=np.float64)
    return FlowField(u=u, v=np.asarray(v, dtype=np.float64),
                     width=u.shape[1], height=u.shape[0])


def test_zero_gradients_zero_histogram():
    z = np.zeros((20, 20))
    assert np.all(orientation_histogram(z, z, (10, 10), 8) == 0)


def test_pure_horizontal_gradient_bin0():
    gx = np.ones((20, 20))
    gy = np.zeros((20, 20))
    bins = orientation_histogram(gx, gy, (10, 10), 8)
    assert bins[0] == pytest.approx(1.0)
    assert np.all(bins[1:] == 0)


def test_matches_naive_oracle_random(rng):
    for _ in range(100):
        gx = rng.standard_normal((24, 30))
        gy = rng.standard_normal((24, 30))
        x = rng.uniform(0, 29)
        y = rng.uniform(0, 23)
        ours = orientation_histogram(gx, gy, (x, y), 4)
        oracle = synth.orientation_hist_oracle(gx, gy, x, y, 4)
        np.testing.assert_allclose(ours, oracle, atol=1e-6)


def test_hog_matches_oracle_on_texture(textured_frame, rng):
    for _ in range(20):
        x = rng.uniform(1, 62)
        y = rng.uniform(1, 46)
        ours = hog_at(textured_frame, (x, y))
        oracle = synth.hog_oracle(textured_frame, (x, y), 8)
        np.testing.assert_allclose(ours, oracle, atol=1e-6)


def test_center_out_of_bounds():
    z = np.zeros((10, 10))
    with pytest.raises(ValueError, match="bounds"):
        orientation_histogram(z, z, (10.5, 2), 3)


def test_uniform_frame_zero_hog():
    assert np.all(hog_at(np.full((30, 30, 1), 7.0), (15, 15)) == 0)


def test_vertical_step_edge_concentrates_bin0():
    frame = np.zeros((32, 32, 1))
    frame[:, 16:] = 200.0
    bins = hog_at(frame, (16, 16))
    assert bins[0] > 0.9


def test_rotation_by_bin_width_shifts_bins(rng):
    h, w = 24, 24
    mags = rng.uniform(0.5, 2.0, (h, w))
    for k in range(4):
        theta = np.radians(20.0 * k + 7.0)
        gx = mags * np.cos(theta)
        gy = mags * np.sin(theta)
        bins = orientation_histogram(gx, gy, (12, 12), 6)
        theta2 = theta + np.radians(20.0)
        bins2 = orientation_histogram(mags * np.cos(theta2),
                                      mags * np.sin(theta2), (12, 12), 6)
        np.testing.assert_allclose(bins2, np.roll(bins, 1), atol=1e-9)


def test_intensity_offset_invariance(textured_frame):
    a = hog_at(textured_frame, (20, 20))
    b = hog_at(textured_frame + 37.0, (20, 20))
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_intensity_scale_invariance(textured_frame):
    a = hog_at(textured_frame, (20, 20))
    b = hog_at(textured_frame * 1.75, (20, 20))
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_gradient_kernel_is_centered_difference():
    plane = np.arange(25.0).reshape(5, 5)
    gx, gy = frame_gradients(plane)
    assert np.all(gx[:, 1:-1] == 2.0)
    assert np.all(gy[1:-1, :] == 10.0)
    assert np.all(gx[:, 0] == 1.0)  # edge-replicated boundary
    assert np.all(gy[-1, :] == 5.0)


# -- motion histograms --------------------------------------------------------

def test_zero_flow_all_zero():
    z = np.zeros((20, 20))
    hof, mbh_x, mbh_y = motion_histograms(_flow(z, z), (10, 10))
    assert np.all(hof == 0) and np.all(mbh_x == 0) and np.all(mbh_y == 0)


def test_constant_flow_hof_bin0_mbh_zero():
    u = np.ones((20, 20))
    v = np.zeros((20, 20))
    hof, mbh_x, mbh_y = motion_histograms(_flow(u, v), (10, 10))
    assert hof[0] == pytest.approx(1.0)
    assert np.all(mbh_x == 0) and np.all(mbh_y == 0)


def test_hof_unsigned_fold():
    rng = np.random.default_rng(5)
    u = rng.standard_normal((22, 22))
    v = rng.standard_normal((22, 22))
    a, _, _ = motion_histograms(_flow(u, v), (11, 11))
    b, _, _ = motion_histograms(_flow(-u, -v), (11, 11))
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_motion_histograms_match_oracle(rng):
    for _ in range(100):
        u = rng.standard_normal((20, 26))
        v = rng.standard_normal((20, 26))
        x = rng.uniform(0, 25)
        y = rng.uniform(0, 19)
        hof, mbh_x, mbh_y = motion_histograms(_flow(u, v), (x, y), 4)
        ohof, ombx, omby = synth.motion_histograms_oracle(u, v, (x, y), 4)
        np.testing.assert_allclose(hof, ohof, atol=1e-6)
        np.testing.assert_allclose(mbh_x, ombx, atol=1e-6)
        np.testing.assert_allclose(mbh_y, omby, atol=1e-6)


def test_rotating_disk_boundary_matches_oracle():
    # swirl field: strong flow gradients at the boundary ring
    ys, xs = np.mgrid[0:32, 0:32].astype(np.float64)
    cx = cy = 15.5
    r = np.hypot(xs - cx, ys - cy)
    inside = r <= 10
    u = np.where(inside, -(ys - cy) * 0.3, 0.0)
    v = np.where(inside, (xs - cx) * 0.3, 0.0)
    for pt in ((25, 15), (15, 25), (6, 15)):
        hof, mbh_x, mbh_y = motion_histograms(_flow(u, v), pt, 8)
        ohof, ombx, omby = synth.motion_histograms_oracle(u, v, pt, 8)
        np.testing.assert_allclose(hof, ohof, atol=1e-6)
        np.testing.assert_allclose(mbh_x, ombx, atol=1e-6)
        np.testing.assert_allclose(mbh_y, omby, atol=1e-6)
