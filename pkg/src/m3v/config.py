"""Flat key=value pipeline configuration.

One file drives the whole pipeline: flow estimation, sampling, patching,
target assembly, masking, model shape, and training. Unknown keys are
rejected and every value is validated by constructing the corresponding
typed config object.
"""

from dataclasses import dataclass, field

from .flow import FlowParams
from .model import ModelConfig, TrainConfig
from .targets import TARGET_KINDS, TargetConfig


class ConfigError(ValueError):
    pass


def _parse_bool(raw, key):
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {raw!r}")


# key -> (section, type)
_SCHEMA = {
    "pyramid_levels": ("flow", int),
    "pyramid_scale": ("flow", float),
    "window_radius": ("flow", int),
    "iterations_per_level": ("flow", int),
    "polynomial_sigma": ("flow", float),
    "flow_bound": ("flow", float),
    "s_rgb": ("sampling", int),
    "interpolate": ("sampling", bool),
    "offset": ("sampling", int),
    "patch_t": ("patch", int),
    "patch_h": ("patch", int),
    "patch_w": ("patch", int),
    "length": ("target", int),
    "k": ("target", int),
    "target_kind": ("target", str),
    "mask_type": ("mask", str),
    "mask_ratio": ("mask", float),
    "mask_seed": ("mask", int),
    "embed_dim": ("model", int),
    "heads": ("model", int),
    "encoder_depth": ("model", int),
    "decoder_depth": ("model", int),
    "decoder_dim": ("model", int),
    "model_seed": ("model", int),
    "learning_rate": ("train", float),
    "beta1": ("train", float),
    "beta2": ("train", float),
    "weight_decay": ("train", float),
    "batch_size": ("train", int),
    "epochs": ("train", int),
    "warmup_epochs": ("train", int),
    "cosine_decay": ("train", bool),
    "data_seed": ("train", int),
}

_DEFAULTS = {
    "s_rgb": 2,
    "interpolate": True,
    "offset": 0,
    "patch_t": 2,
    "patch_h": 16,
    "patch_w": 16,
    "mask_type": "tube",
    "mask_ratio": 0.7,
    "mask_seed": 0,
    "model_seed": 0,
}


@dataclass
class PipelineConfig:
    flow: FlowParams = field(default_factory=FlowParams)
    target: TargetConfig = field(default_factory=TargetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    s_rgb: int = 2
    interpolate: bool = True
    offset: int = 0
    patch_t: int = 2
    patch_h: int = 16
    patch_w: int = 16
    mask_type: str = "tube"
    mask_ratio: float = 0.7
    mask_seed: int = 0
    embed_dim: int = 64
    heads: int = 4
    encoder_depth: int = 4
    decoder_depth: int = 1
    decoder_dim: int = 32
    model_seed: int = 0

    def model_config(self, grid):
        return ModelConfig(
            embed_dim=self.embed_dim,
            heads=self.heads,
            encoder_depth=self.encoder_depth,
            decoder_depth=self.decoder_depth,
            decoder_dim=self.decoder_dim,
            prediction_dim=self.target.prediction_dim(grid),
            patch_dim=grid.t * grid.h * grid.w,
            seed=self.model_seed,
        )


def parse_config_text(text, path="<config>"):
    values = {}
    for lineno, raw_line in enumerate(text.splitlines(), 1):
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        if key not in _SCHEMA:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        _, typ = _SCHEMA[key]
        raw = raw.strip()
        try:
            if typ is bool:
                values[key] = _parse_bool(raw, key)
            else:
                values[key] = typ(raw)
        except ConfigError:
            raise
        except ValueError:
            raise ConfigError(
                f"{path}:{lineno}: {key} expects {typ.__name__}, got {raw!r}"
            )
    return build_config(values, path)


def build_config(values, path="<config>"):
    """Construct a validated PipelineConfig from a key->value dict."""

    def section(name):
        return {k: v for k, v in values.items() if _SCHEMA[k][0] == name}

    try:
        flow = FlowParams(**section("flow"))
        target_kw = section("target")
        if "target_kind" in target_kw and target_kw["target_kind"] not in TARGET_KINDS:
            raise ConfigError(
                f"{path}: target_kind must be one of {', '.join(TARGET_KINDS)}"
            )
        target = TargetConfig(**target_kw)
        train = TrainConfig(**section("train"))
        cfg = PipelineConfig(flow=flow, target=target, train=train)
        for key in ("sampling", "patch", "mask", "model"):
            for name, value in section(key).items():
                setattr(cfg, name, value)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if cfg.s_rgb < 1:
        raise ConfigError(f"{path}: s_rgb must be >= 1")
    if cfg.mask_type not in ("tube", "cube"):
        raise ConfigError(f"{path}: mask_type must be tube or cube")
    if not 0.0 < cfg.mask_ratio < 1.0:
        raise ConfigError(f"{path}: mask_ratio must be in (0, 1)")
    for name in ("patch_t", "patch_h", "patch_w"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{path}: {name} must be >= 1")
    # exercise ModelConfig invariants early (dims vs heads etc.)
    try:
        ModelConfig(embed_dim=cfg.embed_dim, heads=cfg.heads,
                    encoder_depth=cfg.encoder_depth,
                    decoder_depth=cfg.decoder_depth,
                    decoder_dim=cfg.decoder_dim,
                    prediction_dim=1, patch_dim=1, seed=cfg.model_seed)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return cfg


def load_config(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, path)


def default_config():
    return PipelineConfig()
