"""Experiment configuration and its flat ``key = value`` text format."""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .sparse_grid import GridConfig
from .synthetic import SyntheticSpec

SYNTHETIC_PREFIX = "synthetic."


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    k: int = 16
    n_past: int = 2
    aligned: bool = True
    stela: bool = True

    feature_dim: int = 16
    key_dim: int = 0  # 0 selects max(8, feature_dim // 4)
    encoder_hidden: tuple[int, ...] = (64, 128, 256)
    decoder_hidden: tuple[int, ...] = (64,)
    scales: int = 1

    epochs_pretrain: int = 10
    epochs_warmup: int = 5
    epochs_joint: int = 40
    lr_pretrain: float = 1e-3
    lr_warmup: float = 1e-3
    lr_joint: float = 1e-5
    plateau_patience: int = 3
    plateau_factor: float = 0.5
    grad_clip: float = 0.0  # 0 disables clipping

    rho_min: float = 0.0
    rho_max: float = 50.0
    z_min: float = -4.0
    z_max: float = 2.0
    res_h: int = 240
    res_w: int = 180
    res_l: int = 16
    normalize: bool = False

    class_weights: str = "inverse_log"  # or "uniform"
    data: str = "synthetic"  # or a SemanticKITTI root holding sequences/
    class_map: str = ""  # empty selects the bundled SemanticKITTI table
    train_sequences: tuple[str, ...] = ("00",)
    val_sequences: tuple[str, ...] = ("08",)
    train_stride: int = 1
    val_stride: int = 10
    max_frames: int = 0  # 0 keeps every frame
    synthetic_train_seeds: tuple[int, ...] = (1, 2, 3)
    synthetic_val_seeds: tuple[int, ...] = (101,)
    synthetic: dict = field(default_factory=dict, compare=True, hash=False)

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.n_past < 0:
            raise ConfigError("n_past must be >= 0")
        if self.class_weights not in ("inverse_log", "uniform"):
            raise ConfigError(f"unknown class weight scheme {self.class_weights!r}")
        SyntheticSpec.from_dict(self.synthetic)
        self.grid()

    def grid(self) -> GridConfig:
        return GridConfig((self.rho_min, self.rho_max), (self.z_min, self.z_max),
                          (self.res_h, self.res_w, self.res_l), self.feature_dim, self.normalize)

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec.from_dict(self.synthetic)

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)

    def to_flat(self) -> dict[str, object]:
        out = {}
        for f in dataclasses.fields(self):
            if f.name == "synthetic":
                continue
            out[f.name] = getattr(self, f.name)
        for key in sorted(self.synthetic):
            out[SYNTHETIC_PREFIX + key] = self.synthetic[key]
        return out

    @classmethod
    def from_flat(cls, values: dict[str, str | object]) -> ExperimentConfig:
        hints = typing.get_type_hints(cls)
        syn_hints = typing.get_type_hints(SyntheticSpec)
        kwargs, synthetic = {}, {}
        for key, raw in values.items():
            if key.startswith(SYNTHETIC_PREFIX):
                name = key[len(SYNTHETIC_PREFIX):]
                if name not in syn_hints:
                    raise ConfigError(f"unknown synthetic key {key!r}")
                synthetic[name] = _coerce(raw, syn_hints[name], key)
            elif key in hints and key != "synthetic":
                kwargs[key] = _coerce(raw, hints[key], key)
            else:
                raise ConfigError(f"unknown config key {key!r}")
        return cls(synthetic=synthetic, **kwargs)


def _coerce(raw, hint, key):
    if not isinstance(raw, str):
        return tuple(raw) if typing.get_origin(hint) is tuple else raw
    text = raw.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    try:
        if hint is bool:
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if origin is tuple:
            item = args[0]
            return tuple(_coerce(part, item, key) for part in text.split(",") if part.strip())
        if origin is typing.Union or type(None) in args:
            if text.lower() in ("none", ""):
                return None
            inner = next(a for a in args if a is not type(None))
            return _coerce(text, inner, key)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {hint}") from None


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return "none"
    return str(value)


def parse_config_text(text: str) -> ExperimentConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value")
        values[key.strip()] = value.strip()
    return ExperimentConfig.from_flat(values)


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    return parse_config_text(Path(path).read_text())


def dump_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {_format(v)}\n" for k, v in cfg.to_flat().items())
