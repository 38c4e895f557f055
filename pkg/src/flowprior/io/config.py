"""Line-oriented `key = value` configuration files for training runs."""

from __future__ import annotations

from dataclasses import asdict, fields

from ..training import TrainConfig


class ConfigError(ValueError):
    pass


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(name: str, text: str):
    t = _FIELD_TYPES.get(name)
    if t is None:
        raise ConfigError(f"unknown config key {name!r}")
    text = text.strip()
    if t == "bool":
        if text not in ("true", "false"):
            raise ConfigError(f"{name}: expected true/false, got {text!r}")
        return text == "true"
    if t == "int":
        return int(text)
    if t == "float":
        return float(text)
    return text


def format_config(cfg: TrainConfig) -> str:
    lines = [f"{k} = {_format_value(v)}" for k, v in asdict(cfg).items()]
    return "\n".join(lines) + "\n"


def parse_config(text: str) -> TrainConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        values[key] = _parse_value(key, val)
    return TrainConfig(**values)


def read_config_file(path) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read())


def write_config_file(path, cfg: TrainConfig):
    with open(path, "w", encoding="utf-8") as f:
        f.write(format_config(cfg))
