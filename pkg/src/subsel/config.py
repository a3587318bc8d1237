"""Flat ``key = value`` run configuration."""

from __future__ import annotations

from dataclasses import fields, replace
from pathlib import Path

from .apply import ApplyConfig
from .errors import ConfigError
from .trainer import TrainConfig

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Raw key/value pairs; '#' starts a comment, blank lines are skipped."""
    out = {}
    for line_no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{line_no}: expected 'key = value'")
        if key in out:
            raise ConfigError(f"{source}:{line_no}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"), str(path))


def _coerce(key: str, value: str, default):
    try:
        if isinstance(default, bool):
            low = value.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {value!r}") from None
    return value


def known_keys() -> set[str]:
    return set(TrainConfig.field_names()) | set(ApplyConfig.field_names())


def build_configs(raw: dict[str, str] | None = None, seed: int | None = None) -> tuple[TrainConfig, ApplyConfig]:
    """TrainConfig and ApplyConfig from raw pairs; ``seed`` (e.g. from the CLI) wins over the file."""
    raw = dict(raw or {})
    unknown = sorted(set(raw) - known_keys())
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    configs = []
    for cls in (TrainConfig, ApplyConfig):
        base = cls()
        values = {f.name: _coerce(f.name, raw[f.name], getattr(base, f.name)) for f in fields(cls) if f.name in raw}
        if seed is not None:
            values["seed"] = seed
        configs.append(replace(base, **values).validate())
    return configs[0], configs[1]
