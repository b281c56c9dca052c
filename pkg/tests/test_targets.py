import numpy as np
import pytest

from m3v import synth, targets
from m3v.targets import (TargetConfig, TrainingClip, build_clip_targets,
                         build_patch_grid, component_mask, generate_mask,
                         patch_normalize, plan_sampling, read_m3vt, write_m3vt)
from m3v.video_io import gray_plane


def _planes(seq):
    return [gray_plane(f) for f in seq.frames]


# -- grid ----------------------------------------------------------------------

def test_grid_standard_config():
    grid = build_patch_grid(16, 224, 224)
    assert (grid.nt, grid.ny, grid.nx) == (8, 14, 14)
    assert grid.n_patches == 1568


def test_grid_small():
    grid = build_patch_grid(16, 32, 32)
    assert grid.n_patches == 32


def test_grid_divisibility_enforced():
    with pytest.raises(ValueError, match="divide"):
        build_patch_grid(15, 32, 32)


def test_grid_index_roundtrip():
    grid = build_patch_grid(16, 64, 32)
    for linear in range(grid.n_patches):
        assert grid.linear(*grid.unravel(linear)) == linear


# -- masks ----------------------------------------------------------------------

def test_tube_mask_paper_counts():
    grid = build_patch_grid(16, 224, 224)
    mask = generate_mask(grid, "tube", 0.7, rng_seed=0)
    spatial = mask.mask[0]
    assert int(spatial.sum()) == 137          # round(196 * 0.7)
    assert mask.masked_count == 137 * 8 == 1096


def test_tube_mask_identical_across_time():
    grid = build_patch_grid(16, 64, 64)
    mask = generate_mask(grid, "tube", 0.5, rng_seed=3)
    for t in range(1, grid.nt):
        assert np.array_equal(mask.mask[t], mask.mask[0])


def test_mask_deterministic():
    grid = build_patch_grid(16, 64, 64)
    a = generate_mask(grid, "tube", 0.5, rng_seed=42)
    b = generate_mask(grid, "tube", 0.5, rng_seed=42)
    assert np.array_equal(a.mask, b.mask)


def test_cube_mask_count_and_freedom():
    grid = build_patch_grid(16, 32, 32)
    mask = generate_mask(grid, "cube", 0.4, rng_seed=1)
    assert mask.masked_count == 13            # round(32 * 0.4)
    assert mask.mask_type == "cube"
    differs = any(not np.array_equal(mask.mask[t], mask.mask[0])
                  for t in range(1, grid.nt))
    assert differs


@pytest.mark.parametrize("ratio,total,expect", [(0.4, 196, 78),
                                                (0.7, 196, 137),
                                                (0.9, 196, 176)])
def test_round_half_up_counts(ratio, total, expect):
    grid = build_patch_grid(16, 224, 224)
    mask = generate_mask(grid, "tube", ratio, rng_seed=0)
    assert int(mask.mask[0].sum()) == expect


def test_mask_degenerate_ratio_rejected():
    grid = build_patch_grid(16, 32, 32)
    with pytest.raises(ValueError):
        generate_mask(grid, "tube", 0.01, rng_seed=0)
    with pytest.raises(ValueError):
        generate_mask(grid, "tube", 0.999, rng_seed=0)


# -- sampling plan ---------------------------------------------------------------

def test_plan_interpolated():
    plan = plan_sampling(40, s_rgb=2, interpolate=True)
    assert plan.input_indices == tuple(range(0, 32, 2))
    assert plan.s_flow == 1


def test_plan_no_interpolation():
    plan = plan_sampling(40, s_rgb=2, interpolate=False)
    assert plan.s_flow == 2


def test_plan_dense_degenerate():
    plan = plan_sampling(16, s_rgb=1, interpolate=True)
    assert plan.input_indices == tuple(range(16))
    assert plan.s_flow == 1


def test_plan_video_too_short():
    with pytest.raises(ValueError, match="too short"):
        plan_sampling(31, s_rgb=2, interpolate=True)


def test_plan_anchors_first_frame_of_patch():
    plan = plan_sampling(40, s_rgb=2, interpolate=True)
    grid = build_patch_grid(16, 32, 32)
    assert plan.anchors(grid) == [0, 4, 8, 12, 16, 20, 24, 28]


# -- normalization ----------------------------------------------------------------

def test_patch_normalize_frozen_example():
    raw = np.array([1.0, 2.0, 3.0, 4.0])
    out = patch_normalize(raw)
    np.testing.assert_allclose(
        out, [-1.3416407865, -0.4472135955, 0.4472135955, 1.3416407865],
        atol=1e-9)


def test_patch_normalize_degenerate_mean_subtract():
    raw = np.full(8, 3.25)
    assert np.all(patch_normalize(raw) == 0.0)


def test_patch_normalize_excluded_entries_zero():
    raw = np.array([[1.0, 2.0], [100.0, 200.0]])
    include = np.array([[True, True], [False, False]])
    out = patch_normalize(raw, include)
    assert np.all(out[1] == 0.0)
    np.testing.assert_allclose(out[0], [-1.0, 1.0])


# -- assembly ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_setup():
    grid = build_patch_grid(16, 32, 32)
    plan = plan_sampling(22, s_rgb=1, interpolate=True)
    mask = generate_mask(grid, "tube", 0.7, rng_seed=5)
    return grid, plan, mask


def test_zero_motion_targets_all_zero(small_setup):
    grid, plan, mask = small_setup
    seq, _ = synth.gen_moving_disk((32, 32), 5.0, (0.0, 0.0), 22, seed=2)
    tgts, _ = build_clip_targets(_planes(seq), plan, grid, mask,
                                 TargetConfig())
    for t in tgts:
        assert np.all(t.parts["position"] == 0.0)
        assert np.all(t.validity)


def test_trajectory_target_shapes(small_setup):
    grid, plan, mask = small_setup
    seq, _ = synth.gen_moving_disk((32, 32), 5.0, (1.0, 0.0), 22, seed=3)
    cfg = TargetConfig()
    tgts, pack = build_clip_targets(_planes(seq), plan, grid, mask, cfg)
    t = tgts[0]
    assert t.raw_parts["position"].size == 48    # K4 x L6 x 2
    assert t.raw_parts["shape"].size == 216      # K4 x L6 x 9
    assert t.vector.shape == (264,)
    assert cfg.prediction_dim(grid) == 264


def test_rigid_translation_steps_equal_velocity(small_setup):
    grid, plan, mask = small_setup
    seq, truth = synth.gen_translating_texture((32, 32), (1.0, 0.5), 22, seed=4)
    starts = targets.required_flow_starts(plan, grid, TargetConfig())
    flows = synth.analytic_flow_fields(truth, starts, plan.s_flow)
    tgts, _ = build_clip_targets(_planes(seq), plan, grid, mask,
                                 TargetConfig(), flows=flows)
    for t in tgts:
        raw = t.raw_parts["position"]
        for k in range(4):
            if t.validity[k]:
                np.testing.assert_allclose(raw[k, :, 0], 1.0, atol=1e-6)
                np.testing.assert_allclose(raw[k, :, 1], 0.5, atol=1e-6)


def test_patch_norm_statistics(small_setup):
    grid, plan, mask = small_setup
    seq, _ = synth.gen_moving_disk((32, 32), 6.0, (2.0, 0.0), 22, seed=6,
                                   wrap=True)
    tgts, _ = build_clip_targets(_planes(seq), plan, grid, mask,
                                 TargetConfig())
    checked = 0
    for t in tgts:
        for name in ("position", "shape"):
            include = np.broadcast_to(
                t.validity.reshape(-1, *([1] * (t.parts[name].ndim - 1))),
                t.parts[name].shape)
            vals = t.parts[name][include]
            if vals.size < 2 or np.ptp(t.raw_parts[name][include]) < 1e-6:
                continue
            assert abs(vals.mean()) < 1e-5
            assert abs(vals.std() - 1.0) < 1e-4
            checked += 1
    assert checked > 10


def test_cumsum_inversion_exact(small_setup):
    grid, plan, mask = small_setup
    seq, _ = synth.gen_moving_disk((32, 32), 6.0, (1.5, -0.5), 22, seed=7)
    cfg = TargetConfig()
    tgts, pack = build_clip_targets(_planes(seq), plan, grid, mask, cfg)
    i = 0
    for t in tgts:
        for k in range(cfg.k):
            traj = pack.trajectories[i]
            raw = t.raw_parts["position"][k]
            if traj.valid:
                rec = traj.points[0].astype(np.float64) + np.concatenate(
                    [[np.zeros(2)], np.cumsum(raw, axis=0)])
                assert np.array_equal(rec.astype(np.float32), traj.points)
            i += 1


def test_interpolation_references_denser_frames():
    grid = build_patch_grid(16, 32, 32)
    plan = plan_sampling(40, s_rgb=2, interpolate=True)
    cfg = TargetConfig()
    anchors = plan.anchors(grid)
    input_set = set(plan.input_indices)
    # every anchor's trajectory touches raw frames missing from the input
    for a in anchors:
        frames = {a + j * plan.s_flow for j in range(cfg.length + 1)}
        assert frames - input_set
    starts = targets.required_flow_starts(plan, grid, cfg)
    assert any(s not in input_set for s in starts)


def test_baseline_kind_dimensions():
    grid = build_patch_grid(16, 32, 32)
    dims = {
        "pixel": 512,
        "hog": 36,
        "hog+flow": 548,
        "hog+hof": 72,
        "hog+mbh": 108,
        "trajectory": 264,
        "trajectory_no_shape": 84,
    }
    for kind, expect in dims.items():
        assert TargetConfig(target_kind=kind).prediction_dim(grid) == expect


def test_baseline_targets_assemble(small_setup):
    grid, plan, mask = small_setup
    seq, _ = synth.gen_moving_disk((32, 32), 6.0, (1.0, 0.0), 22, seed=8)
    planes = _planes(seq)
    for kind in ("pixel", "hog", "hog+flow", "hog+hof", "hog+mbh",
                 "trajectory_no_shape"):
        cfg = TargetConfig(target_kind=kind)
        tgts, _ = build_clip_targets(planes, plan, grid, mask, cfg)
        assert tgts[0].vector.shape == (cfg.prediction_dim(grid),)


def test_component_mask_structure():
    grid = build_patch_grid(16, 32, 32)
    cfg = TargetConfig()
    validity = np.array([True, False, True, True])
    mask = component_mask(validity, cfg, grid)
    assert mask.shape == (264,)
    assert not mask[12:24].any()       # second trajectory's position block
    assert mask[:12].all()
    assert not mask[48 + 54:48 + 108].any()  # its shape block
    hog_cfg = TargetConfig(target_kind="hog+hof")
    assert component_mask(validity, hog_cfg, grid).all()


def test_invalid_trajectories_raw_zero():
    grid = build_patch_grid(16, 32, 32)
    plan = plan_sampling(22, s_rgb=1, interpolate=True)
    mask = generate_mask(grid, "tube", 0.7, rng_seed=9)
    seq, _ = synth.gen_translating_texture((32, 32), (3.0, 0.0), 22, seed=9)
    tgts, pack = build_clip_targets(_planes(seq), plan, grid, mask,
                                    TargetConfig())
    saw_invalid = False
    for t in tgts:
        for k in range(4):
            if not t.validity[k]:
                saw_invalid = True
                assert np.all(t.parts["position"][k] == 0)
                assert np.all(t.parts["shape"][k] == 0)
    assert saw_invalid


# -- M3VT ---------------------------------------------------------------------

def test_m3vt_roundtrip(small_setup):
    grid, plan, mask = small_setup
    seq, _ = synth.gen_moving_disk((32, 32), 6.0, (1.0, 1.0), 22, seed=10,
                                   wrap=True)
    cfg = TargetConfig()
    tgts, _ = build_clip_targets(_planes(seq), plan, grid, mask, cfg)
    blob = write_m3vt(tgts, grid, mask, plan, cfg)
    tf = read_m3vt(blob)
    assert tf.config == cfg
    assert tf.mask_type == "tube"
    assert tf.s_rgb == 1 and tf.s_flow == 1
    assert np.array_equal(tf.patch_indices, mask.masked_linear())
    assert np.array_equal(tf.vectors, np.stack([t.vector for t in tgts]))
    assert np.array_equal(tf.validity,
                          np.stack([t.validity for t in tgts]))


def test_m3vt_errors(small_setup):
    grid, plan, mask = small_setup
    seq, _ = synth.gen_moving_disk((32, 32), 5.0, (1.0, 0.0), 22, seed=11)
    cfg = TargetConfig(target_kind="pixel")
    tgts, _ = build_clip_targets(_planes(seq), plan, grid, mask, cfg)
    blob = write_m3vt(tgts, grid, mask, plan, cfg)
    with pytest.raises(ValueError, match="magic"):
        read_m3vt(b"ZZZZ" + blob[4:])
    with pytest.raises(ValueError, match="version"):
        read_m3vt(blob[:4] + b"\x55\x00" + blob[6:])
    with pytest.raises(ValueError, match="truncated"):
        read_m3vt(blob[:-11])


def test_training_clip_from_file_matches_direct(small_setup):
    grid, plan, mask = small_setup
    seq, _ = synth.gen_moving_disk((32, 32), 6.0, (1.0, 0.0), 22, seed=12)
    planes = _planes(seq)
    cfg = TargetConfig()
    direct = targets.make_training_clip(planes, plan, grid, mask, cfg,
                                        static_slot=3, label=1)
    tgts, _ = build_clip_targets(planes, plan, grid, mask, cfg)
    tf = read_m3vt(write_m3vt(tgts, grid, mask, plan, cfg))
    loaded = targets.training_clip_from_file(planes, tf, static_slot=3,
                                             label=1)
    assert np.array_equal(direct.patches, loaded.patches)
    assert np.array_equal(direct.patches_static, loaded.patches_static)
    assert np.array_equal(direct.visible_idx, loaded.visible_idx)
    assert np.array_equal(direct.masked_idx, loaded.masked_idx)
    assert np.array_equal(direct.target, loaded.target)
    assert np.array_equal(direct.component_mask, loaded.component_mask)
