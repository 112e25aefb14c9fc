"""TOML run configuration: parsing, validation, serialization and hashing.

Every dataclass field maps to a TOML key of the same name; nested
dataclasses are tables. The heavy-policy mixture is written as a table
``{policy = weight}``. In ``[loss]``, ``lambda`` is accepted as an alias
for ``gamma``.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import fields, is_dataclass
from importlib import resources

import tomli
import tomli_w

from .augment import HeavyAugmentConfig
from .objectives import LossWeights
from .trainer import RunConfig

PRESETS = ("desk", "full")


class ConfigError(ValueError):
    """A configuration value failed parsing or validation; message names the field."""


def _unwrap_optional(tp):
    if typing.get_origin(tp) is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1:
            return args[0]
    return tp


def _coerce(value, tp, path):
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if tp is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected an array, got {value!r}")
        return tuple(value)
    return value


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a table, got {data!r}")
    data = dict(data)
    if cls is LossWeights and "lambda" in data:
        if "gamma" in data:
            raise ConfigError(f"{path}.lambda: give either lambda or gamma, not both")
        data["gamma"] = data.pop("lambda")
    if cls is HeavyAugmentConfig and "mixture" in data:
        mix = data["mixture"]
        if not isinstance(mix, dict):
            raise ConfigError(f"{path}.mixture: expected a table of policy = weight")
        data["mixture"] = tuple((k, _coerce(v, float, f"{path}.mixture.{k}"))
                                for k, v in mix.items())
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"{where}{unknown[0]}: unknown field")
    kwargs = {}
    for name, value in data.items():
        tp = _unwrap_optional(hints[name])
        sub = f"{path}.{name}" if path else name
        if is_dataclass(tp):
            kwargs[name] = _build(tp, value, sub)
        elif name == "mixture":
            kwargs[name] = value
        else:
            kwargs[name] = _coerce(value, tp, sub)
    obj = cls(**kwargs)
    if hasattr(obj, "validate") and cls is not RunConfig:
        try:
            obj.validate()
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{path + '.' if path else ''}{exc}") from exc
    return obj


def config_from_dict(data: dict) -> RunConfig:
    """Build and validate a RunConfig; mode-dependent loss defaults are filled in."""
    cfg = _build(RunConfig, data, "")
    try:
        return cfg.resolved().validate()
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def _plain(obj):
    if is_dataclass(obj):
        out = {}
        for f in fields(obj):
            v = getattr(obj, f.name)
            if v is None:
                continue
            if f.name == "mixture":
                out[f.name] = {k: float(w) for k, w in v}
            else:
                out[f.name] = _plain(v)
        return out
    if isinstance(obj, (tuple, list)):
        return [_plain(v) for v in obj]
    return obj


def config_to_dict(cfg: RunConfig) -> dict:
    return _plain(cfg.resolved())


def dumps_config(cfg: RunConfig) -> str:
    return tomli_w.dumps(config_to_dict(cfg))


def loads_config(text: str) -> RunConfig:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"malformed TOML: {exc}") from exc
    return config_from_dict(data)


def load_config(path) -> RunConfig:
    with open(path, "rb") as fh:
        try:
            data = tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: malformed TOML: {exc}") from exc
    return config_from_dict(data)


def save_config(cfg: RunConfig, path) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        fh.write(dumps_config(cfg))


def config_hash(cfg: RunConfig, ignore=("name",)) -> str:
    """Stable digest of the resolved config, excluding cosmetic fields."""
    # round-trip so that e.g. an int default and its float parse hash alike
    d = config_to_dict(config_from_dict(config_to_dict(cfg)))
    for key in ignore:
        d.pop(key, None)
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def preset_dict(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"preset: unknown preset {name!r} (expected one of {PRESETS})")
    text = resources.files("dssl").joinpath(f"presets/{name}.toml").read_text()
    return tomli.loads(text)


def merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(path=None, preset=None, overrides=None) -> RunConfig:
    """Preset (if any) <- TOML file (if any) <- explicit overrides."""
    data = preset_dict(preset) if preset else {}
    if path:
        with open(path, "rb") as fh:
            try:
                data = merge(data, tomli.load(fh))
            except tomli.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: malformed TOML: {exc}") from exc
    if overrides:
        data = merge(data, overrides)
    return config_from_dict(data)


def with_changes(cfg: RunConfig, **changes) -> RunConfig:
    return dataclasses.replace(cfg, **changes)
