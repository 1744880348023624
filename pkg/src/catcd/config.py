"""Line-oriented ``key = value`` run configuration with desk and paper presets."""

from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace

import numpy as np

from .model import ModelConfig
from .training import LossConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    image_size: int = 64
    channels: tuple = (32, 64, 128)
    encoder_blocks: tuple = (2, 2, 2)
    heads: tuple = (2, 4, 8)
    window_size: int = 8
    mlp_ratio: int = 4
    use_cat: bool = True
    use_gc_cross: bool = True
    use_self_attn: bool = True
    use_dud: bool = True
    lambda_: tuple = (1.0,) * 6
    lr: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 16
    epochs: int = 30
    seed: int = 0
    dtype: str = "float32"

    def model_config(self):
        return ModelConfig(
            image_size=self.image_size,
            channels=self.channels,
            encoder_blocks=self.encoder_blocks,
            heads=self.heads,
            window_size=self.window_size,
            mlp_ratio=self.mlp_ratio,
            use_cat=self.use_cat,
            use_gc_cross=self.use_gc_cross,
            use_self_attn=self.use_self_attn,
            use_dud=self.use_dud,
        )

    def loss_config(self):
        return LossConfig(weights=self.lambda_ if self.use_cat else ())

    @property
    def np_dtype(self):
        return np.dtype(self.dtype).type

    def to_text(self):
        lines = []
        for f in fields(self):
            key = "lambda" if f.name == "lambda_" else f.name
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = " ".join(_fmt(v) for v in value)
            else:
                value = _fmt(value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


DESK = RunConfig()
PAPER = RunConfig(
    image_size=256,
    channels=(96, 192, 384),
    encoder_blocks=(4, 4, 6),
    heads=(3, 6, 12),
    window_size=8,
    lambda_=(1.0,) * 6,
    lr=2e-4,
    weight_decay=0.01,
    batch_size=16,
    epochs=200,
)
PRESETS = {"desk": DESK, "paper": PAPER}


def _parse_bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _parse_list(text, conv, count=None):
    items = [conv(x) for x in text.replace(",", " ").split()]
    if count is not None and len(items) not in count:
        raise ConfigError(f"expected {' or '.join(map(str, count))} values, got {len(items)}")
    return tuple(items)


def _convert(name, text):
    if name in ("channels", "encoder_blocks", "heads"):
        return _parse_list(text, int, (3,))
    if name == "lambda_":
        values = _parse_list(text, float, (1, 6))
        return values * 6 if len(values) == 1 else values
    if name in ("use_cat", "use_gc_cross", "use_self_attn", "use_dud"):
        return _parse_bool(text)
    if name in ("lr", "weight_decay"):
        return float(text)
    if name == "dtype":
        if text.strip() not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {text!r}")
        return text.strip()
    return int(text)


def parse_config(text, base=None):
    """Apply ``key = value`` lines on top of ``base`` (desk preset by default)."""
    known = {f.name for f in fields(RunConfig)}
    updates = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        name = "lambda_" if key == "lambda" else key
        if name not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            updates[name] = _convert(name, value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    cfg = replace(base or DESK, **updates)
    try:
        cfg.model_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path=None, preset="desk", env=None):
    """Preset, then the config file (if any), then ``CAT_SEED`` from the environment."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    cfg = PRESETS[preset]
    if path:
        with open(path, encoding="utf-8") as fh:
            cfg = parse_config(fh.read(), cfg)
    env = os.environ if env is None else env
    if env.get("CAT_SEED"):
        try:
            cfg = replace(cfg, seed=int(env["CAT_SEED"]))
        except ValueError:
            raise ConfigError(f"CAT_SEED must be an integer, got {env['CAT_SEED']!r}") from None
    return cfg
