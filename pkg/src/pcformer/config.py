"""Flat ``key = value`` configuration files shared by model and training settings."""
from __future__ import annotations

import dataclasses
import typing
from pathlib import Path

from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str = "<config>"):
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)
        self.line = line


def _field_types(cls):
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


MODEL_FIELDS = _field_types(ModelConfig)
TRAIN_FIELDS = _field_types(TrainConfig)
assert not set(MODEL_FIELDS) & set(TRAIN_FIELDS), "config keys must be unique"


def _coerce(raw: str, tp):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)) and type(None) in args:
        if raw.lower() in ("none", ""):
            return None
        return _coerce(raw, next(a for a in args if a is not type(None)))
    if origin is tuple:
        item = args[0] if args else int
        return tuple(item(p) for p in raw.replace(",", " ").split()) if raw.strip() else ()
    if tp is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if tp is int:
        return int(raw)
    if tp is float:
        return float(raw)
    return raw


def parse_config(text: str, source: str = "<config>") -> tuple[ModelConfig, TrainConfig]:
    model_kw, train_kw = {}, {}
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", ln, source)
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in MODEL_FIELDS:
            target, tp = model_kw, MODEL_FIELDS[key]
        elif key in TRAIN_FIELDS:
            target, tp = train_kw, TRAIN_FIELDS[key]
        else:
            raise ConfigError(f"unknown key {key!r}", ln, source)
        try:
            target[key] = _coerce(raw, tp)
        except ValueError as err:
            raise ConfigError(f"bad value for {key}: {err}", ln, source) from None
    try:
        return ModelConfig(**model_kw), TrainConfig(**train_kw)
    except ValueError as err:
        raise ConfigError(str(err), None, source) from None


def load_config(path) -> tuple[ModelConfig, TrainConfig]:
    return parse_config(Path(path).read_text(), str(path))


def _fmt(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(model: ModelConfig | None = None, train: TrainConfig | None = None) -> str:
    lines = []
    if model is not None:
        lines.append("# model")
        lines += [f"{k} = {_fmt(getattr(model, k))}" for k in MODEL_FIELDS]
    if train is not None:
        lines.append("# training")
        lines += [f"{k} = {_fmt(getattr(train, k))}" for k in TRAIN_FIELDS]
    return "\n".join(lines) + "\n"
