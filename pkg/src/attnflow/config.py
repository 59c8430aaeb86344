"""Flat ``key = value`` training configuration.

File format: one ``key = value`` per line; ``#`` starts a comment; blank lines
are ignored. Lists are comma separated. Unknown keys are an error. Every key
and its default is listed in :class:`TrainConfig` (see also README).
"""

import dataclasses
import warnings
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .losses import LOSS_NAMES, LossWeights

VARIANTS = ("full", "attn", "flow", "baseline", "noface")


@dataclass
class TrainConfig:
    # model / ablation
    variant: str = "full"
    image_size: int = 64
    scales: tuple = (16, 32)
    key_channels: tuple = (32, 32)
    alpha: float = 100.0
    border_mode: str = "clamp"
    enc_width: int = 16
    flow_width: int = 16
    flow_refine: bool = True
    mask_width: int = 16
    mask_blocks: int = 3
    gen_width: int = 16
    disc_width: int = 32
    disc_conditional: bool = False
    # losses
    lambda_attn: float = 5.0
    lambda_flow: float = 2.0
    lambda_regu: float = 0.001
    lambda_perc: float = 0.5
    lambda_face: float = 1.0
    lambda_style: float = 500.0
    lambda_adv: float = 2.0
    regu_patch: int = 3
    face_margin: float = 1.5
    extractor: str = "random"
    extractor_seed: int = 1234
    extractor_calibrate: bool = True
    perc_taps: tuple = ("relu1", "relu2", "relu3", "relu4")
    style_taps: tuple = ("relu1", "relu2", "relu3", "relu4")
    # optimisation
    lr_g: float = 1e-4
    lr_d: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    pretrain_steps: int = 500
    full_steps: int = 2000
    avg_decay: float = 0.999
    avg_warmup: bool = True
    # data
    data_source: str = "synthetic"
    data_path: str = ""
    num_samples: int = 2000
    identity_prob: float = 0.1
    batch_size: int = 8
    data_seed: int = 0
    shuffle_seed: int = 0
    init_seed: int = 0
    # bookkeeping
    validate_every: int = 200
    val_pairs: int = 64
    checkpoint_every: int = 500
    out_dir: str = "runs/default"
    num_threads: int = 0

    def __post_init__(self):
        self.scales = tuple(int(s) for s in self.scales)
        self.key_channels = tuple(int(k) for k in self.key_channels)
        self.perc_taps = tuple(self.perc_taps)
        self.style_taps = tuple(self.style_taps)
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if len(self.key_channels) != len(self.scales):
            raise ConfigError("key_channels needs one entry per scale")
        if list(self.scales) != sorted(set(self.scales)):
            raise ConfigError("scales must be strictly increasing")
        for s in self.scales:
            if self.image_size % s or (self.image_size // s) & (self.image_size // s - 1):
                raise ConfigError(f"scale {s} must be image_size / 2^k")
        for name in ("pretrain_steps", "full_steps", "validate_every", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0 <= self.avg_decay < 1:
            raise ConfigError("avg_decay must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.border_mode not in ("clamp", "zeros"):
            raise ConfigError("border_mode must be clamp or zeros")
        self.loss_weights()

    def loss_weights(self):
        w = {name: getattr(self, f"lambda_{name}") for name in LOSS_NAMES}
        if self.variant == "noface":
            w["face"] = 0.0
        try:
            return LossWeights(**w)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _parse_value(f, raw):
    default = f.default
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(x) for x in items)
            return tuple(items)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {f.name}: {raw!r}") from exc


def parse_config(text, base=None):
    """Parse config text; keys override ``base`` (default: desk preset)."""
    by_name = {f.name: f for f in fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in by_name:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(by_name[key], raw)
    base = base or TrainConfig()
    return base.replace(**values)


def load_config(path):
    return parse_config(Path(path).read_text())


def full_scale_preset():
    """Full-resolution settings (256 px, batch 24). Not runnable on a desk machine."""
    warnings.warn("the full-scale preset needs a GPU-class machine; use the default desk preset for local runs")
    return TrainConfig(
        image_size=256, scales=(32, 64), key_channels=(128, 64), batch_size=24,
        enc_width=64, flow_width=32, mask_width=32, gen_width=64, disc_width=64,
        pretrain_steps=100_000, full_steps=400_000,
    )
