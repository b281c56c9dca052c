import numpy as np
import pytest

from m3v import model, synth, targets
from m3v.model import (AdamW, MaskedAutoencoder, ModelConfig, TrainConfig,
                       forward_autoencoder, gradient_check, linear_probe,
                       masked_motion_loss, read_checkpoint, train_toy,
                       write_checkpoint)

TINY = ModelConfig(embed_dim=8, heads=1, encoder_depth=1, decoder_depth=1,
                   decoder_dim=8, prediction_dim=10, patch_dim=12, seed=3)


def _batch(cfg=TINY, grid_shape=(2, 2, 2), b=2, seed=0):
    rng = np.random.default_rng(seed)
    n = int(np.prod(grid_shape))
    nm = n // 2
    patches = rng.uniform(-0.5, 0.5, (b, n, cfg.patch_dim)).astype(np.float32)
    perms = np.stack([rng.permutation(n) for _ in range(b)])
    vis = np.sort(perms[:, nm:], axis=1)
    masked = np.sort(perms[:, :nm], axis=1)
    target = rng.standard_normal((b, nm, cfg.prediction_dim)).astype(np.float32)
    comp = rng.uniform(size=target.shape) > 0.15
    return patches, vis, masked, target, comp


# -- forward contract -----------------------------------------------------------

def test_single_masked_patch_shape():
    m = MaskedAutoencoder(TINY, (2, 2, 2))
    patches, vis, masked, _, _ = _batch(b=1)
    vis = np.arange(1, 8)[None]
    masked = np.array([[0]])
    preds, cache = m.forward(patches, vis, masked)
    assert preds.shape == (1, 1, TINY.prediction_dim)
    assert cache["stats"]["encoder_tokens"] == 7


def test_visible_order_permutation_invariance(rng):
    m = MaskedAutoencoder(TINY, (2, 2, 2))
    patches, vis, masked, _, _ = _batch()
    preds1, _ = m.forward(patches, vis, masked)
    perm = rng.permutation(vis.shape[1])
    preds2, _ = m.forward(patches, vis[:, perm], masked)
    np.testing.assert_allclose(preds1, preds2, atol=1e-5)


def test_deterministic_given_seed():
    patches, vis, masked, _, _ = _batch()
    a = MaskedAutoencoder(TINY, (2, 2, 2)).forward(patches, vis, masked)[0]
    b = MaskedAutoencoder(TINY, (2, 2, 2)).forward(patches, vis, masked)[0]
    assert np.array_equal(a, b)


def test_token_count_tracks_mask_ratio():
    grid = targets.build_patch_grid(16, 64, 64)
    mask = targets.generate_mask(grid, "tube", 0.7, rng_seed=0)
    cfg = ModelConfig(prediction_dim=8, patch_dim=grid.t * grid.h * grid.w)
    planes = [np.zeros((64, 64)) for _ in range(16)]
    _, stats = forward_autoencoder(planes, mask, cfg, grid)
    visible = grid.n_patches - mask.masked_count
    assert stats["encoder_tokens"] == visible
    # tube masking at 70% leaves round(0.3 * spatial) of the grid visible
    assert visible / grid.n_patches == pytest.approx(0.3, abs=0.02)


# -- loss ------------------------------------------------------------------------

def test_loss_zero_when_equal():
    t = np.ones((1, 3, 5))
    report, dpred = masked_motion_loss(t, t, np.ones_like(t, dtype=bool))
    assert report.loss == 0.0
    assert np.all(dpred == 0)


def test_two_patch_hand_example():
    # patch A: all 264 components off by one; patch B entirely invalid
    pred = np.zeros((1, 2, 264))
    target = np.zeros((1, 2, 264))
    target[0, 0] = -1.0
    comp = np.zeros((1, 2, 264), dtype=bool)
    comp[0, 0] = True
    report, _ = masked_motion_loss(pred, target, comp)
    assert report.loss == 1.0
    assert report.n_included_components == 264


def test_partial_invalid_matches_bruteforce(rng):
    pred = rng.standard_normal((2, 4, 66))
    target = rng.standard_normal((2, 4, 66))
    comp = rng.uniform(size=pred.shape) > 0.3
    report, _ = masked_motion_loss(pred, target, comp)
    assert report.loss == pytest.approx(
        synth.masked_mean_oracle(pred, target, comp), rel=1e-12)


def test_all_invalid_batch():
    pred = np.ones((1, 2, 8))
    target = np.zeros((1, 2, 8))
    comp = np.zeros_like(pred, dtype=bool)
    report, dpred = masked_motion_loss(pred, target, comp)
    assert report.loss == 0.0
    assert report.all_invalid
    assert np.all(dpred == 0)


def test_loss_patch_order_invariance(rng):
    pred = rng.standard_normal((1, 5, 7))
    target = rng.standard_normal((1, 5, 7))
    comp = rng.uniform(size=pred.shape) > 0.2
    a, _ = masked_motion_loss(pred, target, comp)
    perm = rng.permutation(5)
    b, _ = masked_motion_loss(pred[:, perm], target[:, perm], comp[:, perm])
    assert a.loss == pytest.approx(b.loss, rel=1e-12)


# -- gradients --------------------------------------------------------------------

def test_gradient_check_small_model():
    err = gradient_check(TINY)
    assert err < 1e-3


def test_gradient_check_truncation_order():
    e1 = gradient_check(TINY, h_rel=1e-3)
    e2 = gradient_check(TINY, h_rel=2e-3)
    assert 2.0 < e2 / e1 < 8.0  # central differences truncate at O(h^2)


def test_gradient_zero_inputs_finite():
    cfg = TINY
    m = MaskedAutoencoder(cfg, (2, 2, 2), dtype=np.float64)
    patches = np.zeros((1, 8, cfg.patch_dim))
    vis = np.arange(4)[None]
    masked = np.arange(4, 8)[None]
    preds, cache = m.forward(patches, vis, masked)
    target = np.zeros_like(preds)
    _, dpred = masked_motion_loss(preds, target, np.ones_like(preds, bool))
    grads = m.backward(cache, dpred)
    for g in grads.values():
        assert np.all(np.isfinite(g))
    # head bias gradient against finite differences
    flat = m.params["head.b"]
    analytic = grads["head.b"][0]
    h = 1e-3
    orig = flat[0]
    for sign in (1, -1):
        flat[0] = orig + sign * h
        p, _ = m.forward(patches, vis, masked)
        r, _ = masked_motion_loss(p, target, np.ones_like(p, bool))
        if sign > 0:
            lp = r.loss
        else:
            lm = r.loss
    flat[0] = orig
    assert analytic == pytest.approx((lp - lm) / (2 * h), abs=1e-6)


# -- training ---------------------------------------------------------------------

def _toy_dataset(n_clips=6, seed=0):
    grid = targets.build_patch_grid(16, 32, 32)
    plan = targets.plan_sampling(22, s_rgb=1, interpolate=True)
    cfg_t = targets.TargetConfig()
    data = synth.make_direction_dataset(n_clips, (32, 32), 22, seed=seed,
                                        disk_radius=6.0, speed=1.5,
                                        n_disks=2, wrap=True)
    clips = []
    for i, (seq, truth) in enumerate(data):
        planes = [f[:, :, 0] for f in seq.frames]
        mask = targets.generate_mask(grid, "tube", 0.7, rng_seed=100 + i)
        starts = targets.required_flow_starts(plan, grid, cfg_t)
        flows = synth.analytic_flow_fields(truth, starts, plan.s_flow)
        clips.append(targets.make_training_clip(planes, plan, grid, mask,
                                                cfg_t, flows=flows,
                                                static_slot=i % 16,
                                                label=truth.label))
    return clips, grid


def test_lr_zero_constant_loss():
    clips, grid = _toy_dataset()
    cfg = ModelConfig(prediction_dim=264, patch_dim=512, seed=1)
    tcfg = TrainConfig(learning_rate=0.0, batch_size=4, epochs=3,
                       warmup_epochs=0)
    rows, _ = train_toy(clips, tcfg, cfg, (grid.nt, grid.ny, grid.nx))
    losses = [r["loss"] for r in rows]
    assert max(losses) - min(losses) < 1e-7


def test_training_deterministic():
    clips, grid = _toy_dataset()
    cfg = ModelConfig(prediction_dim=264, patch_dim=512, seed=1)
    tcfg = TrainConfig(learning_rate=1e-3, batch_size=4, epochs=3,
                       warmup_epochs=1)
    a, _ = train_toy(clips, tcfg, cfg, (grid.nt, grid.ny, grid.nx))
    b, _ = train_toy(clips, tcfg, cfg, (grid.nt, grid.ny, grid.nx))
    assert [r["loss"] for r in a] == [r["loss"] for r in b]


def test_divergence_detected():
    clips, grid = _toy_dataset(4)
    cfg = ModelConfig(prediction_dim=264, patch_dim=512, seed=1)
    tcfg = TrainConfig(learning_rate=1e6, batch_size=4, epochs=8,
                       warmup_epochs=0)
    with pytest.raises(model.TrainingDiverged):
        train_toy(clips, tcfg, cfg, (grid.nt, grid.ny, grid.nx))


def test_adamw_moves_toward_target():
    rng = np.random.default_rng(0)
    params = {"w": rng.standard_normal(4).astype(np.float32)}
    opt = AdamW(params, TrainConfig(learning_rate=0.1, weight_decay=0.0))
    for _ in range(200):
        grads = {"w": 2.0 * (params["w"] - 3.0)}
        opt.step(params, grads, 0.1)
    np.testing.assert_allclose(params["w"], 3.0, atol=0.05)


def test_linear_probe_separable_features(rng):
    x = rng.standard_normal((160, 6))
    w_true = rng.standard_normal((6, 4))
    y = (x @ w_true).argmax(axis=1)
    assert linear_probe(x, y, seed=1) >= 0.75


# -- checkpoints ------------------------------------------------------------------

def test_checkpoint_roundtrip(rng):
    params = {
        "a.w": rng.standard_normal((3, 4)).astype(np.float32),
        "b": rng.standard_normal(7).astype(np.float32),
    }
    meta = {"seed": "3", "kind": "trajectory"}
    out_params, out_meta = read_checkpoint(write_checkpoint(params, meta))
    assert out_meta == meta
    for k in params:
        assert np.array_equal(out_params[k], params[k])


def test_checkpoint_errors(rng):
    blob = write_checkpoint({"w": rng.standard_normal(3).astype(np.float32)},
                            {"x": "1"})
    with pytest.raises(ValueError, match="magic"):
        read_checkpoint(b"AAAA" + blob[4:])
    with pytest.raises(ValueError, match="version"):
        read_checkpoint(blob[:4] + b"\x42\x00" + blob[6:])
