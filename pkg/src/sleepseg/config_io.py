"""Flat `key = value` config files with [sections]; lists are bracketed.

Chosen over nested formats for diff-friendliness and zero-dependency
parsing. Two sections are understood: [model] mirrors UTimeConfig and
[train] mirrors TrainConfig.
"""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path

from .model import UTimeConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def _parse_value(raw: str):
    raw = raw.strip()
    if raw.startswith("[") and raw.endswith("]"):
        inner = raw[1:-1].strip()
        return tuple(_parse_value(part) for part in inner.split(",")) if inner else ()
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", ""):
        return None
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    return raw


def _format_value(value) -> str:
    if isinstance(value, (tuple, list)):
        return "[" + ", ".join(str(v) for v in value) + "]"
    if value is None:
        return "none"
    return str(value)


def parse_config_text(text: str) -> dict:
    sections = {}
    current = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            current = stripped[1:-1].strip()
            sections.setdefault(current, {})
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        if current is None:
            raise ConfigError(f"line {lineno}: key outside any [section]")
        key, _, raw = stripped.partition("=")
        sections[current][key.strip()] = _parse_value(raw)
    return sections


def format_config(sections: dict) -> str:
    lines = []
    for name, body in sections.items():
        lines.append(f"[{name}]")
        for key, value in body.items():
            lines.append(f"{key} = {_format_value(value)}")
        lines.append("")
    return "\n".join(lines)


def _build_dataclass(cls, body: dict, section: str):
    valid = {f.name for f in fields(cls)}
    unknown = set(body) - valid
    if unknown:
        raise ConfigError(f"[{section}] has unknown keys: {sorted(unknown)}")
    return cls(**body)


def load_config(path):
    """Read a config file; returns (UTimeConfig, TrainConfig) with defaults
    filling any missing key."""
    sections = parse_config_text(Path(path).read_text(encoding="utf-8"))
    model_cfg = _build_dataclass(UTimeConfig, sections.get("model", {}), "model")
    train_cfg = _build_dataclass(TrainConfig, sections.get("train", {}), "train")
    model_cfg.validate()
    train_cfg.validate()
    return model_cfg, train_cfg


def save_config(path, model_cfg: UTimeConfig, train_cfg: TrainConfig | None = None) -> None:
    sections = {"model": {f.name: getattr(model_cfg, f.name) for f in fields(UTimeConfig)}}
    if train_cfg is not None:
        sections["train"] = {f.name: getattr(train_cfg, f.name) for f in fields(TrainConfig)}
    Path(path).write_text(format_config(sections), encoding="utf-8")
