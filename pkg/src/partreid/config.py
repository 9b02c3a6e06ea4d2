"""Run configuration: nested sections of key=value pairs, strictly validated.

Unknown sections or keys are rejected, every value is type-checked at load
time, and every default matches the reference hyperparameters where the
method defines one (K=3, margin 0.7, P=4, Q=8, flip/erase 0.5, occlusion
0.3, lr 1.5e-4, 100 part-localizer epochs).
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from .synthetic import SyntheticSpec
from .training import TrainConfig


class ConfigError(ValueError):
    """Bad configuration file content."""


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got '{s}'")


def _parse_int_tuple(s: str) -> tuple[int, ...]:
    return tuple(int(p) for p in s.split(","))


def _parse_float_tuple(s: str) -> tuple[float, ...]:
    return tuple(float(p) for p in s.split(","))


@dataclass
class DataConfig:
    image_size: int = 64


@dataclass
class PanetConfig:
    widths: tuple[int, ...] = (16, 32, 64)
    decoder_widths: tuple[int, ...] = (32, 16, 8)
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-4
    seed: int = 1
    rel_threshold: float = 0.5
    refine_threshold: float = 0.5
    grabcut_iters: int = 5
    grabcut_components: int = 5
    grabcut_lambda: float = 50.0
    grabcut_margin: float = 0.05
    pcr_end_to_end: bool = False

    def __post_init__(self):
        if not 0.0 < self.rel_threshold < 1.0:
            raise ConfigError("rel_threshold must be in (0, 1)")
        if self.grabcut_iters < 1:
            raise ConfigError("grabcut_iters must be >= 1")


@dataclass
class PmnetConfig:
    k: int = 3
    stream_width: int = 48
    stream_dim: int = 128
    global_width: int = 128
    global_dim: int = 256
    mam_reduction: int = 16
    seed: int = 2

    def __post_init__(self):
        if self.k < 0:
            raise ConfigError("k must be >= 0")


@dataclass
class EvalConfig:
    lambdas: str = "auto"        # "auto" (learned weights) or "l1,l2,l3"
    protocol: str = "cross-camera"
    rounds: int = 10
    seed: int = 4

    def __post_init__(self):
        if self.protocol not in ("cross-camera", "single-gallery"):
            raise ConfigError(f"unknown protocol '{self.protocol}'")
        if self.lambdas != "auto":
            vals = _parse_float_tuple(self.lambdas)
            if len(vals) != 3 or min(vals) < 0:
                raise ConfigError("lambdas must be 'auto' or three "
                                  "non-negative numbers")

    def lambda_values(self) -> tuple[float, float, float] | None:
        if self.lambdas == "auto":
            return None
        return _parse_float_tuple(self.lambdas)


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    panet: PanetConfig = field(default_factory=PanetConfig)
    pmnet: PmnetConfig = field(default_factory=PmnetConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


_SECTIONS = {
    "data": DataConfig,
    "panet": PanetConfig,
    "pmnet": PmnetConfig,
    "training": TrainConfig,
    "eval": EvalConfig,
}

_TUPLE_PARSERS = {
    ("panet", "widths"): _parse_int_tuple,
    ("panet", "decoder_widths"): _parse_int_tuple,
    ("training", "fixed_weights"): _parse_float_tuple,
}


def _convert(section: str, key: str, raw: str, target_type):
    parser = _TUPLE_PARSERS.get((section, key))
    if parser is not None:
        return parser(raw)
    if target_type is bool:
        return _parse_bool(raw)
    if target_type is int:
        return int(raw)
    if target_type is float:
        return float(raw)
    if target_type is str:
        return raw.strip()
    raise ConfigError(f"no parser for [{section}] {key}")


def load_config(path=None) -> RunConfig:
    """Load a config file; a missing path returns pure defaults."""
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser()
    try:
        cp.read(path)
    except configparser.Error as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    kwargs = {}
    for section in cp.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}] in {path}")
        cls = _SECTIONS[section]
        known = {f.name: f.type for f in fields(cls)}
        sect_kwargs = {}
        for key, raw in cp.items(section):
            if key not in known:
                raise ConfigError(f"unknown key '{key}' in [{section}] of {path}")
            py_type = {f.name: f for f in fields(cls)}[key].type
            base = {"int": int, "float": float, "bool": bool, "str": str}.get(
                str(py_type).replace("builtins.", "").split("[")[0].strip(), None)
            if base is None:
                base = str
            try:
                sect_kwargs[key] = _convert(section, key, raw, base)
            except (ValueError, ConfigError) as e:
                raise ConfigError(
                    f"bad value for '{key}' in [{section}]: {e}") from e
        try:
            kwargs[section] = cls(**sect_kwargs)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"invalid [{section}] config: {e}") from e
    return RunConfig(**kwargs)


_SYNTH_KEYS = {f.name: f.type for f in fields(SyntheticSpec)}


def load_synthetic_spec(path) -> SyntheticSpec:
    """Parse a dataset spec file with a single [synthetic] section."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"spec file not found: {path}")
    cp = configparser.ConfigParser()
    try:
        cp.read(path)
    except configparser.Error as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    if cp.sections() != ["synthetic"]:
        raise ConfigError(f"spec file must contain exactly one [synthetic] "
                          f"section, got {cp.sections()}")
    kwargs = {}
    for key, raw in cp.items("synthetic"):
        if key not in _SYNTH_KEYS:
            raise ConfigError(f"unknown key '{key}' in [synthetic] of {path}")
        t = str(_SYNTH_KEYS[key])
        try:
            if "int" in t:
                kwargs[key] = int(raw)
            elif "float" in t:
                kwargs[key] = float(raw)
            else:
                kwargs[key] = raw.strip()
        except ValueError as e:
            raise ConfigError(f"bad value for '{key}': {e}") from e
    try:
        return SyntheticSpec(**kwargs)
    except ValueError as e:
        raise ConfigError(f"invalid synthetic spec: {e}") from e
