"""Flat ``dotted.key = value`` configuration files.

Values are Python literals (``3``, ``1e-3``, ``(1, 5)``, ``"text"``, ``None``);
anything that does not parse as a literal is kept as a bare string. Lines
starting with ``#`` are comments. Every file carries ``schema_version``.
"""

from __future__ import annotations

import ast
from dataclasses import dataclass, field
from pathlib import Path

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


def _num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _pair(v):
    return isinstance(v, (tuple, list)) and len(v) == 2 and all(_num(x) for x in v)


def _floats(v):
    return isinstance(v, (tuple, list)) and len(v) > 0 and all(_num(x) for x in v)


def _opt_num(v):
    return v is None or _num(v)


def _bool(v):
    return isinstance(v, bool)


def _opt_bool(v):
    return v is None or isinstance(v, bool)


def _str(v):
    return isinstance(v, str)


# key -> (check, description)
SCHEMA = {
    "schema_version": (_int, "integer"),
    "seed": (_int, "integer"),
    "simulate.n_frames": (_int, "integer"),
    "simulate.scatterers": (_pair, "pair (min, max)"),
    "simulate.angles_deg": (_floats, "tuple of angles in degrees"),
    "simulate.R": (_int, "integer"),
    "simulate.snr_db": (_opt_num, "number or None"),
    "simulate.z_range": (_pair, "pair (z_min, z_max) in metres"),
    "simulate.tubes": (_int, "integer"),
    "simulate.frame_dt": (_num, "number"),
    "array.n_elements": (_int, "integer"),
    "array.pitch": (_num, "number"),
    "acquisition.c": (_num, "number"),
    "acquisition.fs": (_num, "number"),
    "acquisition.fc": (_num, "number"),
    "acquisition.n_samples": (_int, "integer"),
    "acquisition.relative_bandwidth": (_num, "number"),
    "acquisition.decimation": (_int, "integer"),
    "network.features": (_int, "integer"),
    "network.G": (_int, "integer"),
    "network.k_in": (_int, "integer"),
    "network.k_sg": (_int, "integer"),
    "network.k_mid": (_int, "integer"),
    "network.k_out": (_int, "integer"),
    "network.n_mid_layers": (_int, "integer"),
    "network.leaky_slope": (_num, "number"),
    "train.epochs": (_int, "integer"),
    "train.batch_size": (_int, "integer"),
    "train.lr": (_num, "number"),
    "train.weight_decay": (_num, "number"),
    "train.lambda1": (_num, "number"),
    "train.sigma_start": (_num, "number"),
    "train.sigma_end": (_num, "number"),
    "train.anneal": (_opt_bool, "true/false or None"),
    "train.val_fraction": (_num, "number"),
    "train.dtype": (_str, "float32 or float64"),
    "train.crop": (lambda v: v is None or _int(v), "integer or None"),
    "train.p_flip": (_num, "number"),
    "train.p_rot": (_num, "number"),
    "train.p_blur": (_num, "number"),
    "train.snr_db": (_opt_num, "number or None"),
}

REQUIRED = {
    "simulate": ("schema_version", "seed", "simulate.n_frames"),
    "train": ("schema_version", "seed", "train.epochs"),
}


@dataclass
class Config:
    values: dict
    lines: dict = field(default_factory=dict)
    path: str = "<config>"

    def get(self, key, default=None):
        return self.values.get(key, default)

    def __contains__(self, key):
        return key in self.values

    def section(self, prefix):
        """``{"a": v}`` for every ``prefix.a`` key."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    def require(self, command):
        for key in REQUIRED.get(command, ()):
            if key not in self.values:
                raise ConfigError(f"{self.path}: missing required field '{key}' for {command}")


def _parse_value(text):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_config(text: str, path: str = "<config>") -> Config:
    values, lines = {}, {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep or not key:
            raise ConfigError(f"{path}:{ln}: expected 'key = value', got {raw.strip()!r}")
        if key in values:
            raise ConfigError(f"{path}:{ln}: duplicate key '{key}' (first set on line {lines[key]})")
        if key not in SCHEMA:
            raise ConfigError(f"{path}:{ln}: unknown key '{key}'")
        value = _parse_value(val)
        check, desc = SCHEMA[key]
        if not check(value):
            raise ConfigError(f"{path}:{ln}: '{key}' must be {desc}, got {val!r}")
        values[key], lines[key] = value, ln
    if "schema_version" not in values:
        raise ConfigError(f"{path}: missing required field 'schema_version'")
    if values["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"{path}:{lines['schema_version']}: unsupported schema_version "
                          f"{values['schema_version']} (expected {SCHEMA_VERSION})")
    return Config(values, lines, path)


def load_config(path) -> Config:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))
