"""Desk-scale masked autoencoder over 3D patches, written directly in numpy.

The encoder attends over visible tokens only; a light decoder fills in
learnable mask tokens and regresses one target vector per masked patch.
Backpropagation is hand-derived layer by layer and validated against central
finite differences (gradient_check). Training is AdamW with linear warmup
and cosine decay.
"""

import math
import os
import struct
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .targets import patchify

M3CK_MAGIC = b"M3CK"
M3CK_VERSION = 1
LN_EPS = 1e-5


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 64
    heads: int = 4
    encoder_depth: int = 4
    decoder_depth: int = 1
    decoder_dim: int = 32
    prediction_dim: int = 264
    patch_dim: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.encoder_depth < 1 or self.decoder_depth < 1:
            raise ValueError("encoder/decoder depth must be >= 1")
        for dim, name in ((self.embed_dim, "embed_dim"),
                          (self.decoder_dim, "decoder_dim")):
            if dim % self.heads:
                raise ValueError(f"{name} must be divisible by heads")
            if dim % 8:
                raise ValueError(f"{name} must be divisible by 8 "
                                 "(factorized positional encoding)")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.05
    batch_size: int = 32
    epochs: int = 50
    warmup_epochs: int = 5
    cosine_decay: bool = True
    data_seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning rate must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    def lr_at(self, epoch):
        if self.warmup_epochs > 0 and epoch < self.warmup_epochs:
            return self.learning_rate * (epoch + 1) / self.warmup_epochs
        if not self.cosine_decay:
            return self.learning_rate
        span = max(self.epochs - self.warmup_epochs, 1)
        progress = (epoch - self.warmup_epochs) / span
        return self.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class LossReport:
    loss: float
    per_patch: np.ndarray
    n_masked: int
    n_excluded_trajectories: int
    n_included_components: int = 0
    all_invalid: bool = False


# ---------------------------------------------------------------------------
# positional encodings
# ---------------------------------------------------------------------------

def _sinusoid(positions, dim):
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    ang = np.outer(np.asarray(positions, dtype=np.float64), freqs)
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def factorized_positions(grid_shape, dim):
    """Fixed sinusoidal encodings factorized over (time, y, x)."""
    nt, ny, nx = grid_shape
    d_t = dim // 2
    d_y = dim // 4
    d_x = dim - d_t - d_y
    tt, yy, xx = np.meshgrid(np.arange(nt), np.arange(ny), np.arange(nx),
                             indexing="ij")
    return np.concatenate([_sinusoid(tt.ravel(), d_t),
                           _sinusoid(yy.ravel(), d_y),
                           _sinusoid(xx.ravel(), d_x)], axis=1)


# ---------------------------------------------------------------------------
# layers (forward + hand-derived backward)
# ---------------------------------------------------------------------------

def _linear(x, w, b):
    return x @ w + b


def _linear_back(x, w, dy):
    flat_x = x.reshape(-1, x.shape[-1])
    flat_dy = dy.reshape(-1, dy.shape[-1])
    dw = flat_x.T @ flat_dy
    db = flat_dy.sum(axis=0)
    dx = dy @ w.T
    return dx, dw, db


def _layernorm(x, gamma, beta):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return gamma * xhat + beta, (xhat, inv)


def _layernorm_back(cache, gamma, dy):
    xhat, inv = cache
    dgamma = (dy * xhat).reshape(-1, dy.shape[-1]).sum(axis=0)
    dbeta = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    dxhat = dy * gamma
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dgamma, dbeta


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def _gelu(x):
    x2 = x * x
    u = _GELU_C * (x + _GELU_A * x2 * x)
    return 0.5 * x * (1.0 + np.tanh(u))


def _gelu_back(x, dy):
    x2 = x * x
    u = _GELU_C * (x + _GELU_A * x2 * x)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def _split_heads(x, heads):
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


class MaskedAutoencoder:
    """Encoder over visible tokens, mask-token decoder, linear output head."""

    def __init__(self, cfg, grid_shape, dtype=np.float32):
        self.cfg = cfg
        self.grid_shape = tuple(grid_shape)
        self.n_tokens = int(np.prod(grid_shape))
        self.dtype = np.dtype(dtype)
        self.enc_pos = factorized_positions(grid_shape, cfg.embed_dim).astype(dtype)
        self.dec_pos = factorized_positions(grid_shape, cfg.decoder_dim).astype(dtype)
        self.params = self._init_params()

    # -- parameters ---------------------------------------------------------

    def _init_params(self):
        cfg = self.cfg
        rng = np.random.default_rng(cfg.seed)
        params = {}

        def weight(name, shape, std=0.02):
            w = rng.standard_normal(shape) * std
            params[name] = np.clip(w, -2 * std, 2 * std).astype(self.dtype)

        def zeros(name, shape):
            params[name] = np.zeros(shape, dtype=self.dtype)

        def ones(name, shape):
            params[name] = np.ones(shape, dtype=self.dtype)

        def block(prefix, dim):
            hidden = 4 * dim
            ones(f"{prefix}.ln1.g", (dim,))
            zeros(f"{prefix}.ln1.b", (dim,))
            for nm in ("q", "k", "v", "o"):
                weight(f"{prefix}.attn.w{nm}", (dim, dim))
                zeros(f"{prefix}.attn.b{nm}", (dim,))
            ones(f"{prefix}.ln2.g", (dim,))
            zeros(f"{prefix}.ln2.b", (dim,))
            weight(f"{prefix}.mlp.w1", (dim, hidden))
            zeros(f"{prefix}.mlp.b1", (hidden,))
            weight(f"{prefix}.mlp.w2", (hidden, dim))
            zeros(f"{prefix}.mlp.b2", (dim,))

        weight("embed.w", (cfg.patch_dim, cfg.embed_dim))
        zeros("embed.b", (cfg.embed_dim,))
        for i in range(cfg.encoder_depth):
            block(f"enc{i}", cfg.embed_dim)
        ones("enc_ln.g", (cfg.embed_dim,))
        zeros("enc_ln.b", (cfg.embed_dim,))
        weight("dec_proj.w", (cfg.embed_dim, cfg.decoder_dim))
        zeros("dec_proj.b", (cfg.decoder_dim,))
        zeros("mask_token", (cfg.decoder_dim,))
        for i in range(cfg.decoder_depth):
            block(f"dec{i}", cfg.decoder_dim)
        ones("dec_ln.g", (cfg.decoder_dim,))
        zeros("dec_ln.b", (cfg.decoder_dim,))
        weight("head.w", (cfg.decoder_dim, cfg.prediction_dim))
        zeros("head.b", (cfg.prediction_dim,))
        return params

    # -- transformer block --------------------------------------------------

    def _attn_forward(self, x, prefix):
        p = self.params
        heads = self.cfg.heads
        q = _linear(x, p[f"{prefix}.attn.wq"], p[f"{prefix}.attn.bq"])
        k = _linear(x, p[f"{prefix}.attn.wk"], p[f"{prefix}.attn.bk"])
        v = _linear(x, p[f"{prefix}.attn.wv"], p[f"{prefix}.attn.bv"])
        qh = _split_heads(q, heads)
        kh = _split_heads(k, heads)
        vh = _split_heads(v, heads)
        scale = 1.0 / math.sqrt(qh.shape[-1])
        s = qh @ kh.swapaxes(-1, -2) * scale
        s = s - s.max(axis=-1, keepdims=True)
        e = np.exp(s)
        a = e / e.sum(axis=-1, keepdims=True)
        o = _merge_heads(a @ vh)
        y = _linear(o, p[f"{prefix}.attn.wo"], p[f"{prefix}.attn.bo"])
        return y, (x, qh, kh, vh, a, o, scale)

    def _attn_backward(self, cache, prefix, dy, grads):
        p = self.params
        x, qh, kh, vh, a, o, scale = cache
        do, dwo, dbo = _linear_back(o, p[f"{prefix}.attn.wo"], dy)
        grads[f"{prefix}.attn.wo"] += dwo
        grads[f"{prefix}.attn.bo"] += dbo
        doh = _split_heads(do, self.cfg.heads)
        da = doh @ vh.swapaxes(-1, -2)
        dvh = a.swapaxes(-1, -2) @ doh
        ds = a * (da - (da * a).sum(axis=-1, keepdims=True))
        dqh = (ds @ kh) * scale
        dkh = (ds.swapaxes(-1, -2) @ qh) * scale
        dx = np.zeros_like(x)
        for nm, dh in (("wq", dqh), ("wk", dkh), ("wv", dvh)):
            dmerged = _merge_heads(dh)
            dxi, dw, db = _linear_back(x, p[f"{prefix}.attn.{nm}"], dmerged)
            grads[f"{prefix}.attn.{nm}"] += dw
            grads[f"{prefix}.attn.b{nm[1]}"] += db
            dx += dxi
        return dx

    def _block_forward(self, x, prefix):
        p = self.params
        n1, ln1c = _layernorm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
        att, attc = self._attn_forward(n1, prefix)
        x2 = x + att
        n2, ln2c = _layernorm(x2, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
        h = _linear(n2, p[f"{prefix}.mlp.w1"], p[f"{prefix}.mlp.b1"])
        g = _gelu(h)
        m = _linear(g, p[f"{prefix}.mlp.w2"], p[f"{prefix}.mlp.b2"])
        out = x2 + m
        return out, (ln1c, attc, ln2c, n2, h, g)

    def _block_backward(self, cache, prefix, dy, grads):
        p = self.params
        ln1c, attc, ln2c, n2, h, g = cache
        dg, dw2, db2 = _linear_back(g, p[f"{prefix}.mlp.w2"], dy)
        grads[f"{prefix}.mlp.w2"] += dw2
        grads[f"{prefix}.mlp.b2"] += db2
        dh = _gelu_back(h, dg)
        dn2, dw1, db1 = _linear_back(n2, p[f"{prefix}.mlp.w1"], dh)
        grads[f"{prefix}.mlp.w1"] += dw1
        grads[f"{prefix}.mlp.b1"] += db1
        dx2, dg2, db2n = _layernorm_back(ln2c, p[f"{prefix}.ln2.g"], dn2)
        grads[f"{prefix}.ln2.g"] += dg2
        grads[f"{prefix}.ln2.b"] += db2n
        dx2 = dx2 + dy
        datt = self._attn_backward(attc, prefix, dx2, grads)
        dx, dg1, db1n = _layernorm_back(ln1c, p[f"{prefix}.ln1.g"], datt)
        grads[f"{prefix}.ln1.g"] += dg1
        grads[f"{prefix}.ln1.b"] += db1n
        return dx + dx2

    # -- full model ---------------------------------------------------------

    def forward(self, patches, visible_idx, masked_idx):
        """patches (B, N, P) float, index arrays (B, Nv) / (B, Nm).

        Returns (predictions (B, Nm, pred_dim), cache). cache["stats"] counts
        the tokens each stage attended over.
        """
        p = self.params
        x = np.asarray(patches, dtype=self.dtype)
        b = x.shape[0]
        ar = np.arange(b)[:, None]
        tokens = _linear(x, p["embed.w"], p["embed.b"]) + self.enc_pos[None]
        xv = tokens[ar, visible_idx]
        enc_caches = []
        for i in range(self.cfg.encoder_depth):
            xv, c = self._block_forward(xv, f"enc{i}")
            enc_caches.append(c)
        xe, enc_lnc = _layernorm(xv, p["enc_ln.g"], p["enc_ln.b"])
        yv = _linear(xe, p["dec_proj.w"], p["dec_proj.b"])
        tok = np.broadcast_to(p["mask_token"],
                              (b, self.n_tokens, self.cfg.decoder_dim)).copy()
        tok[ar, visible_idx] = yv
        tok = tok + self.dec_pos[None]
        dec_caches = []
        for i in range(self.cfg.decoder_depth):
            tok, c = self._block_forward(tok, f"dec{i}")
            dec_caches.append(c)
        td, dec_lnc = _layernorm(tok, p["dec_ln.g"], p["dec_ln.b"])
        preds_full = _linear(td, p["head.w"], p["head.b"])
        preds = preds_full[ar, masked_idx]
        cache = {
            "x": x, "ar": ar, "visible_idx": visible_idx,
            "masked_idx": masked_idx, "enc_caches": enc_caches,
            "enc_lnc": enc_lnc, "xe": xe, "dec_caches": dec_caches,
            "dec_lnc": dec_lnc, "td": td,
            "stats": {
                "encoder_tokens": int(b * visible_idx.shape[1]),
                "decoder_tokens": int(b * self.n_tokens),
                "masked_tokens": int(b * masked_idx.shape[1]),
            },
        }
        return preds, cache

    def backward(self, cache, dpreds):
        p = self.params
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        ar = cache["ar"]
        b = cache["x"].shape[0]
        dpreds_full = np.zeros((b, self.n_tokens, self.cfg.prediction_dim),
                               dtype=self.dtype)
        dpreds_full[ar, cache["masked_idx"]] = np.asarray(dpreds, self.dtype)
        dtd, dwh, dbh = _linear_back(cache["td"], p["head.w"], dpreds_full)
        grads["head.w"] += dwh
        grads["head.b"] += dbh
        dtok, dg, db = _layernorm_back(cache["dec_lnc"], p["dec_ln.g"], dtd)
        grads["dec_ln.g"] += dg
        grads["dec_ln.b"] += db
        for i in reversed(range(self.cfg.decoder_depth)):
            dtok = self._block_backward(cache["dec_caches"][i], f"dec{i}",
                                        dtok, grads)
        vis = cache["visible_idx"]
        dyv = dtok[ar, vis]
        mask_sel = np.ones((b, self.n_tokens), dtype=bool)
        np.put_along_axis(mask_sel, vis, False, axis=1)
        grads["mask_token"] += dtok[mask_sel].sum(axis=0)
        dxe, dwp, dbp = _linear_back(cache["xe"], p["dec_proj.w"], dyv)
        grads["dec_proj.w"] += dwp
        grads["dec_proj.b"] += dbp
        dxv, dg, db = _layernorm_back(cache["enc_lnc"], p["enc_ln.g"], dxe)
        grads["enc_ln.g"] += dg
        grads["enc_ln.b"] += db
        for i in reversed(range(self.cfg.encoder_depth)):
            dxv = self._block_backward(cache["enc_caches"][i], f"enc{i}",
                                       dxv, grads)
        dtokens = np.zeros((b, self.n_tokens, self.cfg.embed_dim),
                           dtype=self.dtype)
        dtokens[ar, vis] = dxv
        _, dwe, dbe = _linear_back(cache["x"], p["embed.w"], dtokens)
        grads["embed.w"] += dwe
        grads["embed.b"] += dbe
        return grads

    def encode(self, patches, token_idx=None):
        """Final-layernorm encoder features; all tokens visible by default."""
        p = self.params
        x = np.asarray(patches, dtype=self.dtype)
        b = x.shape[0]
        if token_idx is None:
            token_idx = np.broadcast_to(np.arange(self.n_tokens),
                                        (b, self.n_tokens))
        ar = np.arange(b)[:, None]
        tokens = _linear(x, p["embed.w"], p["embed.b"]) + self.enc_pos[None]
        xv = tokens[ar, token_idx]
        for i in range(self.cfg.encoder_depth):
            xv, _ = self._block_forward(xv, f"enc{i}")
        xe, _ = _layernorm(xv, p["enc_ln.g"], p["enc_ln.b"])
        return xe


def forward_autoencoder(clip_planes, mask, cfg, grid):
    """Spec-level wrapper: 16 input planes + mask map -> per-masked-patch
    predictions and forward stats."""
    patches = patchify(np.stack(clip_planes), grid)[None]
    model = MaskedAutoencoder(cfg, (grid.nt, grid.ny, grid.nx))
    preds, cache = model.forward(patches,
                                 mask.visible_linear()[None],
                                 mask.masked_linear()[None])
    return preds[0], cache["stats"]


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def masked_motion_loss(pred, target, comp_mask, n_excluded_trajectories=0):
    """Mean squared error over included components only.

    Components belonging to invalid trajectories carry comp_mask=False and
    contribute neither to the numerator nor the denominator. An entirely
    excluded batch yields loss 0 with all_invalid set.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    inc = np.asarray(comp_mask, dtype=bool)
    diff = np.where(inc, pred - target, 0.0)
    sq = diff * diff
    n_inc = int(inc.sum())
    per_patch_counts = np.maximum(inc.sum(axis=-1), 1)
    per_patch = sq.sum(axis=-1) / per_patch_counts
    if n_inc == 0:
        return LossReport(loss=0.0, per_patch=per_patch,
                          n_masked=int(np.prod(pred.shape[:-1])),
                          n_excluded_trajectories=n_excluded_trajectories,
                          n_included_components=0,
                          all_invalid=True), np.zeros_like(pred)
    loss = float(sq.sum() / n_inc)
    dpred = 2.0 * diff / n_inc
    report = LossReport(loss=loss, per_patch=per_patch,
                        n_masked=int(np.prod(pred.shape[:-1])),
                        n_excluded_trajectories=n_excluded_trajectories,
                        n_included_components=n_inc)
    return report, dpred


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class AdamW:
    def __init__(self, params, cfg):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads, lr):
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for name in sorted(params):
            g = grads[name].astype(np.float64)
            m = self.m[name] = c.beta1 * self.m[name] + (1 - c.beta1) * g
            v = self.v[name] = c.beta2 * self.v[name] + (1 - c.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + 1e-8)
            p64 = params[name].astype(np.float64)
            p64 -= lr * (update + c.weight_decay * p64)
            params[name] = p64.astype(params[name].dtype)


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

def _epoch_seconds():
    return os.environ.get("M3V_FIXED_TIMING", "") not in ("1", "true", "yes")


def _stack_batch(clips, idx, input_mode):
    attr = "patches" if input_mode == "multi" else "patches_static"
    patches = np.stack([getattr(clips[i], attr) for i in idx])
    vis = np.stack([clips[i].visible_idx for i in idx])
    masked = np.stack([clips[i].masked_idx for i in idx])
    target = np.stack([clips[i].target for i in idx])
    comp = np.stack([clips[i].component_mask for i in idx])
    n_inv = sum(clips[i].n_invalid for i in idx)
    return patches, vis, masked, target, comp, n_inv


def train_toy(dataset, train_cfg, model_cfg, grid_shape, input_mode="multi",
              on_epoch=None):
    """Train an autoencoder on prepared TrainingClips.

    Returns (rows, model) where rows are per-epoch dicts with keys
    epoch/loss/lr/seconds. Raises TrainingDiverged on non-finite loss.
    """
    if not dataset:
        raise ValueError("empty dataset")
    if input_mode == "static" and dataset[0].patches_static is None:
        raise ValueError("dataset was built without static variants")
    model = MaskedAutoencoder(model_cfg, grid_shape)
    opt = AdamW(model.params, train_cfg)
    order_rng = np.random.default_rng(train_cfg.data_seed)
    rows = []
    n = len(dataset)
    for epoch in range(train_cfg.epochs):
        t0 = time.perf_counter()
        lr = train_cfg.lr_at(epoch)
        order = order_rng.permutation(n)
        total_sq = 0.0
        total_inc = 0
        for start in range(0, n, train_cfg.batch_size):
            idx = order[start:start + train_cfg.batch_size]
            patches, vis, masked, target, comp, n_inv = _stack_batch(
                dataset, idx, input_mode)
            preds, cache = model.forward(patches, vis, masked)
            report, dpred = masked_motion_loss(preds, target, comp, n_inv)
            if not math.isfinite(report.loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            if lr > 0:
                grads = model.backward(cache, dpred)
                opt.step(model.params, grads, lr)
            total_sq += report.loss * report.n_included_components
            total_inc += report.n_included_components
        # component-weighted so the value is independent of batch grouping
        mean_loss = total_sq / total_inc if total_inc else 0.0
        seconds = time.perf_counter() - t0 if _epoch_seconds() else 0.0
        rows.append({"epoch": epoch, "loss": mean_loss, "lr": lr,
                     "seconds": seconds})
        if on_epoch:
            on_epoch(rows[-1])
    return rows, model


def evaluate_loss(model, dataset, input_mode="multi", batch_size=32):
    total_sq = 0.0
    total_inc = 0
    for start in range(0, len(dataset), batch_size):
        idx = list(range(start, min(start + batch_size, len(dataset))))
        patches, vis, masked, target, comp, n_inv = _stack_batch(
            dataset, idx, input_mode)
        preds, _ = model.forward(patches, vis, masked)
        report, _ = masked_motion_loss(preds, target, comp, n_inv)
        total_sq += report.loss * report.n_included_components
        total_inc += report.n_included_components
    return total_sq / total_inc if total_inc else 0.0


def static_video_probe(datasets, train_cfg, model_cfg, grid_shape):
    """Four training runs: {pixel, trajectory} x {multi, static} inputs.

    `datasets` maps target kind to TrainingClips that carry both input
    variants and targets computed from the true multi-frame clips. Returns
    (rows, ratios): rows have epoch/target/input_mode/loss; ratios map kind
    to final static/multi loss.
    """
    rows = []
    finals = {}
    for kind, clips in datasets.items():
        pred_dim = clips[0].target.shape[-1]
        cfg = replace(model_cfg, prediction_dim=pred_dim)
        for input_mode in ("multi", "static"):
            history, _ = train_toy(clips, train_cfg, cfg, grid_shape,
                                   input_mode=input_mode)
            for row in history:
                rows.append({"epoch": row["epoch"], "target": kind,
                             "input_mode": input_mode, "loss": row["loss"]})
            finals[(kind, input_mode)] = history[-1]["loss"]
    ratios = {kind: finals[(kind, "static")] / finals[(kind, "multi")]
              for kind, mode in finals if mode == "multi"}
    return rows, ratios


def encoder_features(model, clips, input_mode="multi", batch_size=64):
    """Mean-pooled full-visibility encoder features, one row per clip."""
    feats = []
    attr = "patches" if input_mode == "multi" else "patches_static"
    for start in range(0, len(clips), batch_size):
        batch = clips[start:start + batch_size]
        patches = np.stack([getattr(c, attr) for c in batch])
        xe = model.encode(patches)
        feats.append(xe.mean(axis=1))
    return np.concatenate(feats, axis=0)


def linear_probe(features, labels, train_frac=0.75, seed=0, epochs=300,
                 lr=0.05):
    """4-way softmax probe on frozen features; returns held-out accuracy."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n_classes = int(y.max()) + 1
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(x))
    n_train = int(round(train_frac * len(x)))
    tr, te = order[:n_train], order[n_train:]
    mu = x[tr].mean(axis=0)
    sd = x[tr].std(axis=0) + 1e-8
    xtr = (x[tr] - mu) / sd
    xte = (x[te] - mu) / sd
    w = np.zeros((x.shape[1], n_classes))
    b = np.zeros(n_classes)
    onehot = np.eye(n_classes)[y[tr]]
    m_w = np.zeros_like(w)
    v_w = np.zeros_like(w)
    m_b = np.zeros_like(b)
    v_b = np.zeros_like(b)
    for t in range(1, epochs + 1):
        logits = xtr @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        probs = e / e.sum(axis=1, keepdims=True)
        dlogits = (probs - onehot) / len(xtr)
        gw = xtr.T @ dlogits + 1e-4 * w
        gb = dlogits.sum(axis=0)
        for g, mm, vv, p in ((gw, m_w, v_w, w), (gb, m_b, v_b, b)):
            mm *= 0.9
            mm += 0.1 * g
            vv *= 0.999
            vv += 0.001 * g * g
            p -= lr * (mm / (1 - 0.9 ** t)) / (np.sqrt(vv / (1 - 0.999 ** t)) + 1e-8)
    pred = (xte @ w + b).argmax(axis=1)
    return float((pred == y[te]).mean())


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def gradient_check(model_cfg, grid_shape=(2, 2, 2), batch=2, seed=0,
                   h_rel=1e-3, dtype=np.float64, invalid_fraction=0.2):
    """Max relative error between analytic and central-FD gradients.

    Checks every parameter element. The model runs in float64 here so the
    finite differences are limited by truncation, not rounding.
    """
    model = MaskedAutoencoder(model_cfg, grid_shape, dtype=dtype)
    n = model.n_tokens
    n_masked = max(1, n // 2)
    rng = np.random.default_rng(seed + 1)
    patches = rng.uniform(0.0, 1.0, (batch, n, model_cfg.patch_dim))
    perms = np.stack([rng.permutation(n) for _ in range(batch)])
    vis = np.sort(perms[:, n_masked:], axis=1)
    masked = np.sort(perms[:, :n_masked], axis=1)
    target = rng.standard_normal((batch, n_masked, model_cfg.prediction_dim))
    comp = rng.uniform(size=target.shape) >= invalid_fraction

    def loss_value():
        preds, _ = model.forward(patches, vis, masked)
        report, _ = masked_motion_loss(preds, target, comp)
        return report.loss

    preds, cache = model.forward(patches, vis, masked)
    _, dpred = masked_motion_loss(preds, target, comp)
    grads = model.backward(cache, dpred)

    worst = 0.0
    for name in sorted(model.params):
        p = model.params[name]
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite analytic gradient in {name}")
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            h = h_rel * max(1.0, abs(float(orig)))
            flat[i] = orig + h
            lp = loss_value()
            flat[i] = orig - h
            lm = loss_value()
            flat[i] = orig
            fd = (lp - lm) / (2.0 * h)
            denom = max(abs(float(gflat[i])), abs(fd), 1e-6)
            worst = max(worst, abs(float(gflat[i]) - fd) / denom)
    return worst


# ---------------------------------------------------------------------------
# checkpoint serialization (M3CK)
# ---------------------------------------------------------------------------

def write_checkpoint(params, meta):
    lines = "".join(f"{k}={v}\n" for k, v in sorted(meta.items()))
    blob = lines.encode("utf-8")
    chunks = [M3CK_MAGIC, struct.pack("<HI", M3CK_VERSION, len(blob)), blob,
              struct.pack("<I", len(params))]
    for name in sorted(params):
        tensor = np.ascontiguousarray(params[name], dtype="<f4")
        nm = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nm)))
        chunks.append(nm)
        chunks.append(struct.pack("<B", tensor.ndim))
        chunks.append(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        chunks.append(tensor.tobytes())
    return b"".join(chunks)


def read_checkpoint(data):
    if data[:4] != M3CK_MAGIC:
        raise ValueError("not an M3CK payload (bad magic)")
    version, meta_len = struct.unpack_from("<HI", data, 4)
    if version != M3CK_VERSION:
        raise ValueError(f"unsupported M3CK version {version}")
    pos = 10
    meta = {}
    for line in data[pos:pos + meta_len].decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        meta[key] = value
    pos += meta_len
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos)
        pos += 4 * size
        params[name] = arr.reshape(shape).copy()
    if pos > len(data):
        raise ValueError("truncated M3CK payload")
    return params, meta


def save_checkpoint(path, params, meta):
    with open(path, "wb") as fh:
        fh.write(write_checkpoint(params, meta))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return read_checkpoint(fh.read())
